//! Restricted deterministic XML: a line-per-element writer and a small
//! parser for the same subset (elements, attributes, text, the five
//! predefined entities). Callers enforce canonical form by re-serializing a
//! parsed value and comparing bytes.

use thiserror::Error;

pub(crate) const DECLARATION: &str = r#"<?xml version="1.0" encoding="UTF-8"?>"#;
const INDENT: &str = "  ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed XML at byte {offset}: {message}")]
pub struct XmlError {
    pub offset: usize,
    pub message: String,
}

pub(crate) struct XmlWriter {
    out: String,
    depth: usize,
}

impl XmlWriter {
    pub fn new() -> Self {
        let mut out = String::with_capacity(512);
        out.push_str(DECLARATION);
        out.push('\n');
        Self { out, depth: 0 }
    }

    fn start_line(&mut self, name: &str, attrs: &[(&str, &str)]) {
        for _ in 0..self.depth {
            self.out.push_str(INDENT);
        }
        self.out.push('<');
        self.out.push_str(name);
        for (k, v) in attrs {
            self.out.push(' ');
            self.out.push_str(k);
            self.out.push_str("=\"");
            escape_into(&mut self.out, v, true);
            self.out.push('"');
        }
    }

    pub fn open(&mut self, name: &str, attrs: &[(&str, &str)]) {
        self.start_line(name, attrs);
        self.out.push_str(">\n");
        self.depth += 1;
    }

    pub fn close(&mut self, name: &str) {
        self.depth -= 1;
        for _ in 0..self.depth {
            self.out.push_str(INDENT);
        }
        self.out.push_str("</");
        self.out.push_str(name);
        self.out.push_str(">\n");
    }

    pub fn leaf(&mut self, name: &str, attrs: &[(&str, &str)], text: &str) {
        self.start_line(name, attrs);
        self.out.push('>');
        escape_into(&mut self.out, text, false);
        self.out.push_str("</");
        self.out.push_str(name);
        self.out.push_str(">\n");
    }

    pub fn empty(&mut self, name: &str, attrs: &[(&str, &str)]) {
        self.start_line(name, attrs);
        self.out.push_str("/>\n");
    }

    pub fn finish(self) -> Vec<u8> {
        debug_assert_eq!(self.depth, 0);
        self.out.into_bytes()
    }
}

fn escape_into(out: &mut String, s: &str, attribute: bool) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' if attribute => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
}

/// Text that the writer can place on one line unchanged.
pub(crate) fn is_line_safe(s: &str) -> bool {
    !s.chars().any(char::is_control)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Element {
    pub name: String,
    pub attrs: Vec<(String, String)>,
    pub children: Vec<Element>,
    pub text: String,
}

impl Element {
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.children.iter().filter(move |c| c.name == name)
    }
}

/// Parses a single-root document. The XML declaration is optional here;
/// canonical checks happen in the callers.
pub(crate) fn parse_document(input: &str) -> Result<Element, XmlError> {
    let mut p = Parser { src: input, pos: 0 };
    if p.rest().starts_with("<?xml") {
        match p.rest().find("?>") {
            Some(end) => p.pos += end + 2,
            None => return Err(p.err("unterminated declaration")),
        }
    }
    p.skip_ws();
    let root = p.element()?;
    p.skip_ws();
    if p.pos != input.len() {
        return Err(p.err("trailing content after root element"));
    }
    Ok(root)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn err(&self, message: &str) -> XmlError {
        XmlError {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start_matches([' ', '\t', '\n', '\r']);
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> Result<(), XmlError> {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            Ok(())
        } else {
            Err(self.err(&format!("expected `{token}`")))
        }
    }

    fn name(&mut self) -> Result<String, XmlError> {
        let rest = self.rest();
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return Err(self.err("expected a name")),
        }
        let end = chars
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-')))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        self.pos += end;
        Ok(rest[..end].to_string())
    }

    fn element(&mut self) -> Result<Element, XmlError> {
        self.eat("<")?;
        let name = self.name()?;
        let mut attrs: Vec<(String, String)> = Vec::new();
        loop {
            let before = self.pos;
            self.skip_ws();
            if self.rest().starts_with("/>") {
                self.pos += 2;
                return Ok(Element {
                    name,
                    attrs,
                    children: Vec::new(),
                    text: String::new(),
                });
            }
            if self.rest().starts_with('>') {
                self.pos += 1;
                break;
            }
            if self.pos == before {
                return Err(self.err("expected whitespace before attribute"));
            }
            let key = self.name()?;
            self.skip_ws();
            self.eat("=")?;
            self.skip_ws();
            let quote = match self.rest().chars().next() {
                Some(q @ ('"' | '\'')) => q,
                _ => return Err(self.err("expected quoted attribute value")),
            };
            self.pos += 1;
            let end = self
                .rest()
                .find(quote)
                .ok_or_else(|| self.err("unterminated attribute value"))?;
            let raw = &self.rest()[..end];
            if raw.contains('<') {
                return Err(self.err("`<` in attribute value"));
            }
            let value = unescape(raw).map_err(|m| self.err(&m))?;
            self.pos += end + 1;
            if attrs.iter().any(|(k, _)| *k == key) {
                return Err(self.err("duplicate attribute"));
            }
            attrs.push((key, value));
        }

        let mut children = Vec::new();
        let mut text = String::new();
        loop {
            let rest = self.rest();
            if rest.is_empty() {
                return Err(self.err(&format!("unclosed element <{name}>")));
            }
            if rest.starts_with("</") {
                self.pos += 2;
                let close = self.name()?;
                if close != name {
                    return Err(self.err(&format!("mismatched close tag </{close}> for <{name}>")));
                }
                self.skip_ws();
                self.eat(">")?;
                break;
            }
            if rest.starts_with("<!") || rest.starts_with("<?") {
                return Err(self.err("comments, DTDs and processing instructions are not supported"));
            }
            if rest.starts_with('<') {
                children.push(self.element()?);
                continue;
            }
            let end = rest.find('<').unwrap_or(rest.len());
            let chunk = unescape(&rest[..end]).map_err(|m| self.err(&m))?;
            text.push_str(&chunk);
            self.pos += end;
        }

        if !children.is_empty() {
            if !text.trim_matches([' ', '\t', '\n', '\r']).is_empty() {
                return Err(self.err(&format!("mixed content in <{name}>")));
            }
            text.clear();
        }
        Ok(Element {
            name,
            attrs,
            children,
            text,
        })
    }
}

fn unescape(raw: &str) -> Result<String, String> {
    if !raw.contains('&') {
        return Ok(raw.to_string());
    }
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let end = rest.find(';').ok_or("unterminated entity reference")?;
        let replacement = match &rest[..=end] {
            "&amp;" => '&',
            "&lt;" => '<',
            "&gt;" => '>',
            "&quot;" => '"',
            "&apos;" => '\'',
            other => return Err(format!("unsupported entity {other}")),
        };
        out.push(replacement);
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
