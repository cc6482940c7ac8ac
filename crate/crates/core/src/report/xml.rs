//! Just enough of XML to check that generated SVG is well formed: elements,
//! attributes, text, comments, processing instructions and the five
//! predefined entities plus numeric references. No DTDs, no CDATA.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum XmlNode {
    Element(XmlElement),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct XmlElement {
    pub name: String,
    pub attrs: Vec<(String, String)>,
    pub children: Vec<XmlNode>,
}

impl XmlElement {
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    /// Every descendant element (self included) in document order.
    pub fn descendants(&self) -> Vec<&XmlElement> {
        let mut out = vec![self];
        for c in &self.children {
            if let XmlNode::Element(e) = c {
                out.extend(e.descendants());
            }
        }
        out
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for c in &self.children {
            match c {
                XmlNode::Text(t) => s.push_str(t),
                XmlNode::Element(e) => s.push_str(&e.text()),
            }
        }
        s
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(ch),
        }
    }
    out
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

fn bad(pos: usize, msg: &str) -> Error {
    Error::format(format!("xml at byte {pos}: {msg}"))
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '.' | ':')
}

impl<'a> Parser<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<()> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(bad(self.pos, &format!("expected {s:?}")))
        }
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn skip_until(&mut self, end: &str) -> Result<()> {
        match self.rest().find(end) {
            Some(i) => {
                self.pos += i + end.len();
                Ok(())
            }
            None => Err(bad(self.pos, &format!("unterminated, missing {end:?}"))),
        }
    }

    /// Comments and processing instructions between markup.
    fn skip_misc(&mut self) -> Result<()> {
        loop {
            self.skip_ws();
            if self.eat("<!--") {
                self.skip_until("-->")?;
            } else if self.eat("<?") {
                self.skip_until("?>")?;
            } else {
                return Ok(());
            }
        }
    }

    fn name(&mut self) -> Result<String> {
        let rest = self.rest();
        let len = rest.find(|c: char| !is_name_char(c)).unwrap_or(rest.len());
        if len == 0 || rest.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '.') {
            return Err(bad(self.pos, "expected a name"));
        }
        self.pos += len;
        Ok(rest[..len].to_string())
    }

    fn decode(&self, raw: &str, at: usize) -> Result<String> {
        let mut out = String::with_capacity(raw.len());
        let mut it = raw.split('&');
        out.push_str(it.next().unwrap_or(""));
        for piece in it {
            let end = piece.find(';').ok_or_else(|| bad(at, "unterminated entity"))?;
            let ent = &piece[..end];
            let ch = match ent {
                "amp" => '&',
                "lt" => '<',
                "gt" => '>',
                "quot" => '"',
                "apos" => '\'',
                _ => {
                    let code = if let Some(h) = ent.strip_prefix("#x") {
                        u32::from_str_radix(h, 16).ok()
                    } else if let Some(d) = ent.strip_prefix('#') {
                        d.parse().ok()
                    } else {
                        None
                    };
                    code.and_then(char::from_u32)
                        .ok_or_else(|| bad(at, &format!("unknown entity &{ent};")))?
                }
            };
            out.push(ch);
            out.push_str(&piece[end + 1..]);
        }
        Ok(out)
    }

    fn element(&mut self) -> Result<XmlElement> {
        self.expect("<")?;
        let name = self.name()?;
        let mut attrs: Vec<(String, String)> = Vec::new();
        loop {
            let had_ws = self.rest().starts_with(char::is_whitespace);
            self.skip_ws();
            if self.eat("/>") {
                return Ok(XmlElement {
                    name,
                    attrs,
                    children: Vec::new(),
                });
            }
            if self.eat(">") {
                break;
            }
            if !had_ws {
                return Err(bad(self.pos, "expected whitespace before attribute"));
            }
            let key = self.name()?;
            self.skip_ws();
            self.expect("=")?;
            self.skip_ws();
            let quote = if self.eat("\"") {
                '"'
            } else if self.eat("'") {
                '\''
            } else {
                return Err(bad(self.pos, "attribute value must be quoted"));
            };
            let start = self.pos;
            let len = self
                .rest()
                .find(quote)
                .ok_or_else(|| bad(start, "unterminated attribute value"))?;
            let raw = &self.src[start..start + len];
            if raw.contains('<') {
                return Err(bad(start, "'<' in attribute value"));
            }
            self.pos += len + 1;
            if attrs.iter().any(|(k, _)| *k == key) {
                return Err(bad(start, &format!("duplicate attribute {key}")));
            }
            let value = self.decode(raw, start)?;
            attrs.push((key, value));
        }
        let mut children = Vec::new();
        loop {
            if self.eat("</") {
                let close = self.name()?;
                if close != name {
                    return Err(bad(self.pos, &format!("</{close}> closes <{name}>")));
                }
                self.skip_ws();
                self.expect(">")?;
                return Ok(XmlElement { name, attrs, children });
            }
            if self.eat("<!--") {
                self.skip_until("-->")?;
            } else if self.eat("<?") {
                self.skip_until("?>")?;
            } else if self.rest().starts_with('<') {
                children.push(XmlNode::Element(self.element()?));
            } else if self.rest().is_empty() {
                return Err(bad(self.pos, &format!("<{name}> is never closed")));
            } else {
                let start = self.pos;
                let len = self.rest().find('<').unwrap_or(self.rest().len());
                self.pos += len;
                let text = self.decode(&self.src[start..start + len], start)?;
                children.push(XmlNode::Text(text));
            }
        }
    }
}

/// Parses a document with exactly one root element.
pub fn parse_xml(src: &str) -> Result<XmlElement> {
    let mut p = Parser { src, pos: 0 };
    p.skip_misc()?;
    if !p.rest().starts_with('<') {
        return Err(bad(p.pos, "expected the root element"));
    }
    let root = p.element()?;
    p.skip_misc()?;
    if !p.rest().is_empty() {
        return Err(bad(p.pos, "content after the root element"));
    }
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_document() {
        let doc = r#"<?xml version="1.0"?>
<!-- c -->
<svg a="1" b='x &amp; y'><g><rect/><text>A &lt; B&#33;</text></g></svg>"#;
        let root = parse_xml(doc).unwrap();
        assert_eq!(root.name, "svg");
        assert_eq!(root.attr("b"), Some("x & y"));
        assert_eq!(root.descendants().len(), 4);
        assert_eq!(root.text(), "A < B!");
    }

    #[test]
    fn rejects_malformed() {
        for doc in [
            "<a>",
            "<a></b>",
            "<a x=1/>",
            "<a x=\"1\" x=\"2\"/>",
            "<a/><b/>",
            "<a>&bogus;</a>",
            "text",
            "<a x=\"1\"y=\"2\"/>",
        ] {
            assert!(parse_xml(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn escape_round_trips_through_text() {
        let s = "a<b & \"c\" 'd'>";
        let root = parse_xml(&format!("<t v=\"{}\">{}</t>", escape(s), escape(s))).unwrap();
        assert_eq!(root.attr("v"), Some(s));
        assert_eq!(root.text(), s);
    }
}
