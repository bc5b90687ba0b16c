//! Restricted placeholder grammar for tune templates.
//!
//! A template is experiment-config text containing placeholders of the form
//! `{{ net_paras["key"] }}` or `{{ opt_paras["key"][1]["sub"] }}`: a root
//! record name followed by one or more string or integer selectors. The
//! selected value is spliced in as a JSON fragment (`true`, `0.05`,
//! `"relu"`, `[1, 2]`), so templates stay valid JSON after rendering.
//!
//! `{{` never occurs in JSON itself (an object brace is always followed by
//! a key string, never another brace), so no escaping is needed.

use serde_json::Value;

use crate::error::{Error, Result};

/// One parsed placeholder: which record it reads and the selector path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placeholder {
    pub root: Root,
    pub path: Vec<Selector>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Root {
    NetParas,
    OptParas,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selector {
    Key(String),
    Index(usize),
}

impl std::fmt::Display for Placeholder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.root {
            Root::NetParas => write!(f, "net_paras")?,
            Root::OptParas => write!(f, "opt_paras")?,
        }
        for selector in &self.path {
            match selector {
                Selector::Key(key) => write!(f, "[\"{key}\"]")?,
                Selector::Index(i) => write!(f, "[{i}]")?,
            }
        }
        Ok(())
    }
}

/// Substitutes every placeholder against the two records. Unresolved or
/// malformed placeholders fail with the offending path spelled out.
pub fn render(template: &str, net_paras: &Value, opt_paras: &Value) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or_else(|| {
            Error::Template(format!(
                "unterminated placeholder starting at {:?}",
                preview(&rest[open..])
            ))
        })?;
        let placeholder = parse_placeholder(&after[..close])?;
        let record = match placeholder.root {
            Root::NetParas => net_paras,
            Root::OptParas => opt_paras,
        };
        out.push_str(&resolve(&placeholder, record)?);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// All placeholders in order of appearance, without rendering.
pub fn placeholders(template: &str) -> Result<Vec<Placeholder>> {
    let mut found = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or_else(|| {
            Error::Template(format!(
                "unterminated placeholder starting at {:?}",
                preview(&rest[open..])
            ))
        })?;
        found.push(parse_placeholder(&after[..close])?);
        rest = &after[close + 2..];
    }
    Ok(found)
}

fn resolve(placeholder: &Placeholder, record: &Value) -> Result<String> {
    let mut current = record;
    for (depth, selector) in placeholder.path.iter().enumerate() {
        let next = match selector {
            Selector::Key(key) => current.get(key.as_str()),
            Selector::Index(i) => current.get(*i),
        };
        current = next.ok_or_else(|| {
            let partial = Placeholder {
                root: placeholder.root,
                path: placeholder.path[..=depth].to_vec(),
            };
            Error::Template(format!("{partial} is not present in this record"))
        })?;
    }
    Ok(current.to_string())
}

/// Parses the text between `{{` and `}}`.
fn parse_placeholder(body: &str) -> Result<Placeholder> {
    let mut cursor = Cursor::new(body);
    cursor.skip_spaces();
    let root = if cursor.eat("net_paras") {
        Root::NetParas
    } else if cursor.eat("opt_paras") {
        Root::OptParas
    } else {
        return Err(Error::Template(format!(
            "placeholder must start with net_paras or opt_paras: {:?}",
            body.trim()
        )));
    };
    let mut path = Vec::new();
    cursor.skip_spaces();
    while cursor.eat("[") {
        cursor.skip_spaces();
        path.push(cursor.selector(body)?);
        cursor.skip_spaces();
        if !cursor.eat("]") {
            return Err(Error::Template(format!(
                "missing ']' in placeholder {:?}",
                body.trim()
            )));
        }
        cursor.skip_spaces();
    }
    if path.is_empty() {
        return Err(Error::Template(format!(
            "placeholder selects nothing: {:?}",
            body.trim()
        )));
    }
    if !cursor.at_end() {
        return Err(Error::Template(format!(
            "unexpected trailing {:?} in placeholder {:?}",
            cursor.rest(),
            body.trim()
        )));
    }
    Ok(Placeholder { root, path })
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor { text, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos == self.text.len()
    }

    fn skip_spaces(&mut self) {
        self.pos += self
            .rest()
            .len()
            .saturating_sub(self.rest().trim_start().len());
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    /// A quoted key (either quote style) or a non-negative integer index.
    fn selector(&mut self, body: &str) -> Result<Selector> {
        let rest = self.rest();
        let mut chars = rest.chars();
        match chars.next() {
            Some(quote @ ('"' | '\'')) => {
                let inner = &rest[1..];
                let end = inner.find(quote).ok_or_else(|| {
                    Error::Template(format!("unterminated key in placeholder {:?}", body.trim()))
                })?;
                self.pos += end + 2;
                Ok(Selector::Key(inner[..end].to_string()))
            }
            Some(c) if c.is_ascii_digit() => {
                let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
                self.pos += digits.len();
                let index = digits.parse().map_err(|_| {
                    Error::Template(format!("index out of range in placeholder {:?}", body.trim()))
                })?;
                Ok(Selector::Index(index))
            }
            _ => Err(Error::Template(format!(
                "expected a quoted key or index in placeholder {:?}",
                body.trim()
            ))),
        }
    }
}

fn preview(text: &str) -> &str {
    &text[..text.len().min(30)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn bool_renders_as_lowercase_json() {
        let net = json!({"bn": true});
        let out = render(r#""bn": {{ net_paras["bn"] }}"#, &net, &json!({})).unwrap();
        assert_eq!(out, r#""bn": true"#);
    }

    #[test]
    fn float_renders_without_decoration() {
        let opt = json!({"lr": 0.05});
        let out = render(r#"{{ opt_paras["lr"] }}"#, &json!({}), &opt).unwrap();
        assert_eq!(out, "0.05");
    }

    #[test]
    fn template_without_placeholders_is_identity() {
        let text = r#"{"a": {"b": [1, {"c": 2}]}, "s": "x[y]"}"#;
        assert_eq!(render(text, &json!({}), &json!({})).unwrap(), text);
    }

    #[test]
    fn nested_selectors_walk_arrays_and_objects() {
        let net = json!({"activation": ["relu", "maxout"], "head": {"width": 512}});
        let out = render(
            r#"act={{ net_paras["activation"][1] }} w={{net_paras['head']['width']}}"#,
            &net,
            &json!({}),
        )
        .unwrap();
        assert_eq!(out, r#"act="maxout" w=512"#);
    }

    #[test]
    fn strings_render_as_quoted_json_fragments() {
        let net = json!({"kind": "conv"});
        let out = render(r#"{"type": {{ net_paras["kind"] }}}"#, &net, &json!({})).unwrap();
        assert_eq!(out, r#"{"type": "conv"}"#);
        assert!(serde_json::from_str::<Value>(&out).is_ok());
    }

    #[test]
    fn missing_key_error_names_the_path() {
        let err = render(r#"{{ net_paras["bn"] }}"#, &json!({"lr": 1}), &json!({}))
            .unwrap_err()
            .to_string();
        assert!(err.contains(r#"net_paras["bn"]"#), "{err}");
    }

    #[test]
    fn deep_miss_reports_the_partial_path() {
        let net = json!({"a": [{"b": 1}]});
        let err = render(r#"{{ net_paras["a"][3]["b"] }}"#, &net, &json!({}))
            .unwrap_err()
            .to_string();
        assert!(err.contains(r#"net_paras["a"][3]"#), "{err}");
        assert!(!err.contains(r#"["b"]"#), "path went past the miss: {err}");
    }

    #[test]
    fn malformed_placeholders_are_parse_errors() {
        for bad in [
            "{{ paras[\"x\"] }}",
            "{{ net_paras }}",
            "{{ net_paras[\"a\" }}",
            "{{ net_paras[\"a\"] junk }}",
            "{{ net_paras[-1] }}",
            "{{ net_paras[\"a\"]",
        ] {
            assert!(
                render(bad, &json!({"a": 1}), &json!({})).is_err(),
                "accepted {bad:?}"
            );
        }
    }

    #[test]
    fn placeholder_census_reports_in_order() {
        let found = placeholders(
            r#"{"lr": {{ opt_paras["lr"] }}, "bn": {{ net_paras["bn"] }}}"#,
        )
        .unwrap();
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].root, Root::OptParas);
        assert_eq!(found[1].root, Root::NetParas);
        assert_eq!(found[1].to_string(), r#"net_paras["bn"]"#);
    }
}
