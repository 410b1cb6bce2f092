use super::{ExecError, LoadError};

/// Built-in text transforms available to templates.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    /// Prefix every non-empty line with `n` spaces.
    Indent(usize),
    /// Join the outputs of the inner parts with a separator, skipping empty ones.
    Join(String),
    /// Parse the inner text as an integer and add `k`.
    IntAdd(i64),
    Upper,
    Lower,
    /// Uppercase the first character.
    Capitalize,
}

/// Position remapping from the inner text of a transform to its output, with
/// separate tables for span starts and span ends (indexed by byte offset).
pub(crate) struct Remap {
    pub starts: Vec<usize>,
    pub ends: Vec<usize>,
}

impl Remap {
    pub fn span(&self, start: usize, end: usize) -> (usize, usize) {
        let s = self.starts[start];
        (s, self.ends[end].max(s))
    }
}

impl Transform {
    pub(crate) fn from_doc(name: &str, arg: Option<&serde_json::Value>) -> Result<Self, LoadError> {
        let bad = |message: &str| LoadError::TransformArg {
            name: name.to_string(),
            message: message.to_string(),
        };
        Ok(match name {
            "indent" => {
                let n = arg
                    .and_then(|a| a.as_u64())
                    .ok_or_else(|| bad("expected a nonnegative integer"))?;
                Transform::Indent(n as usize)
            }
            "join" => {
                let sep = arg
                    .and_then(|a| a.as_str())
                    .ok_or_else(|| bad("expected a separator string"))?;
                Transform::Join(sep.to_string())
            }
            "int_add" => {
                let k = arg
                    .and_then(|a| a.as_i64())
                    .ok_or_else(|| bad("expected an integer"))?;
                Transform::IntAdd(k)
            }
            "upper" => Transform::Upper,
            "lower" => Transform::Lower,
            "capitalize" => Transform::Capitalize,
            other => return Err(LoadError::UnknownTransform(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Indent(_) => "indent",
            Transform::Join(_) => "join",
            Transform::IntAdd(_) => "int_add",
            Transform::Upper => "upper",
            Transform::Lower => "lower",
            Transform::Capitalize => "capitalize",
        }
    }

    /// Apply to `inner`; `bounds` holds the byte offset where each inner part
    /// began (used by `join`).
    pub(crate) fn apply(&self, inner: &str, bounds: &[usize]) -> Result<(String, Remap), ExecError> {
        match self {
            Transform::Upper => Ok(per_char(inner, |_, c, out| out.extend(c.to_uppercase()))),
            Transform::Lower => Ok(per_char(inner, |_, c, out| out.extend(c.to_lowercase()))),
            Transform::Capitalize => Ok(per_char(inner, |i, c, out| {
                if i == 0 {
                    out.extend(c.to_uppercase())
                } else {
                    out.push(c)
                }
            })),
            Transform::Indent(n) => Ok(indent(inner, *n)),
            Transform::Join(sep) => Ok(join(inner, bounds, sep)),
            Transform::IntAdd(k) => {
                let parsed: i64 = inner.trim().parse().map_err(|_| ExecError::Transform {
                    name: self.name().into(),
                    message: format!("not an integer: {inner:?}"),
                })?;
                let out = parsed
                    .checked_add(*k)
                    .ok_or_else(|| ExecError::Transform {
                        name: self.name().into(),
                        message: "integer overflow".into(),
                    })?
                    .to_string();
                let len = out.len();
                let mut starts = vec![len; inner.len() + 1];
                let mut ends = vec![len; inner.len() + 1];
                starts[0] = 0;
                ends[0] = 0;
                if inner.is_empty() {
                    ends[0] = len;
                }
                Ok((out, Remap { starts, ends }))
            }
        }
    }
}

fn per_char(inner: &str, mut f: impl FnMut(usize, char, &mut String)) -> (String, Remap) {
    let mut out = String::with_capacity(inner.len());
    let mut table = vec![0; inner.len() + 1];
    for (i, (pos, c)) in inner.char_indices().enumerate() {
        table[pos] = out.len();
        f(i, c, &mut out);
    }
    table[inner.len()] = out.len();
    (
        out,
        Remap {
            starts: table.clone(),
            ends: table,
        },
    )
}

fn indent(inner: &str, n: usize) -> (String, Remap) {
    let pad = " ".repeat(n);
    let mut out = String::with_capacity(inner.len() + n * 4);
    let mut starts = vec![0; inner.len() + 1];
    let mut ends = vec![0; inner.len() + 1];
    let mut at_line_start = true;
    for (pos, c) in inner.char_indices() {
        ends[pos] = out.len();
        if at_line_start && c != '\n' {
            out.push_str(&pad);
        }
        starts[pos] = out.len();
        out.push(c);
        at_line_start = c == '\n';
    }
    starts[inner.len()] = out.len();
    ends[inner.len()] = out.len();
    (out, Remap { starts, ends })
}

fn join(inner: &str, bounds: &[usize], sep: &str) -> (String, Remap) {
    // non-empty pieces tile the inner text
    let mut pieces = Vec::new();
    for (k, &b) in bounds.iter().enumerate() {
        let e = bounds.get(k + 1).copied().unwrap_or(inner.len());
        if e > b {
            pieces.push((b, e));
        }
    }
    let mut out = String::with_capacity(inner.len() + sep.len() * pieces.len());
    let mut starts = vec![0; inner.len() + 1];
    let mut ends = vec![0; inner.len() + 1];
    for (k, &(b, e)) in pieces.iter().enumerate() {
        if k > 0 {
            out.push_str(sep);
        }
        let base = out.len();
        out.push_str(&inner[b..e]);
        for p in b..e {
            starts[p] = base + (p - b);
        }
        for p in b + 1..=e {
            ends[p] = base + (p - b);
        }
    }
    starts[inner.len()] = out.len();
    (out, Remap { starts, ends })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_transforms() {
        assert_eq!(Transform::Upper.apply("liftoff", &[0]).unwrap().0, "LIFTOFF");
        assert_eq!(Transform::Lower.apply("LiftOff", &[0]).unwrap().0, "liftoff");
        assert_eq!(Transform::Capitalize.apply("liftoff now", &[0]).unwrap().0, "Liftoff now");
    }

    #[test]
    fn int_add_parses_and_rejects() {
        assert_eq!(Transform::IntAdd(1).apply("10", &[0]).unwrap().0, "11");
        assert_eq!(Transform::IntAdd(-11).apply(" 10 ", &[0]).unwrap().0, "-1");
        assert!(Transform::IntAdd(1).apply("ten", &[0]).is_err());
    }

    #[test]
    fn indent_prefixes_non_empty_lines() {
        let (out, map) = Transform::Indent(2).apply("a\n\nbc\n", &[0]).unwrap();
        assert_eq!(out, "  a\n\n  bc\n");
        // "bc" spans [3,5) in the inner text
        assert_eq!(map.span(3, 5), (7, 9));
    }

    #[test]
    fn join_skips_empty_pieces_and_maps_spans() {
        // pieces "ab", "", "cd"
        let (out, map) = Transform::Join(", ".into()).apply("abcd", &[0, 2, 2]).unwrap();
        assert_eq!(out, "ab, cd");
        assert_eq!(map.span(0, 2), (0, 2));
        assert_eq!(map.span(2, 4), (4, 6));
        assert_eq!(map.span(0, 4), (0, 6));
    }

    #[test]
    fn unknown_transform_is_rejected() {
        assert!(matches!(
            Transform::from_doc("conjugate", None),
            Err(LoadError::UnknownTransform(n)) if n == "conjugate"
        ));
        assert!(Transform::from_doc("indent", None).is_err());
    }
}
