//! Placeholder scanning for `{name}` tokens in command and message templates.

pub const FILE_TOKEN: &str = "file";

/// A piece of a parsed template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Splits a template into literal text and `{identifier}` placeholders.
/// Braces that do not enclose an identifier are literal text.
pub fn segments(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut literal_start = 0;
    let mut cursor = 0;
    while let Some(open) = template[cursor..].find('{').map(|i| i + cursor) {
        let Some(close) = template[open + 1..].find('}').map(|i| i + open + 1) else {
            break;
        };
        let name = &template[open + 1..close];
        if is_identifier(name) {
            if literal_start < open {
                out.push(Segment::Literal(&template[literal_start..open]));
            }
            out.push(Segment::Placeholder(name));
            literal_start = close + 1;
            cursor = close + 1;
        } else {
            cursor = open + 1;
        }
    }
    if literal_start < template.len() {
        out.push(Segment::Literal(&template[literal_start..]));
    }
    out
}

pub fn placeholders(template: &str) -> Vec<String> {
    segments(template)
        .into_iter()
        .filter_map(|s| match s {
            Segment::Placeholder(name) => Some(name.to_owned()),
            Segment::Literal(_) => None,
        })
        .collect()
}

/// Substitutes placeholders through `lookup`; unknown names are returned as
/// the error.
pub fn render<F>(template: &str, mut lookup: F) -> Result<String, String>
where
    F: FnMut(&str) -> Option<String>,
{
    let mut out = String::with_capacity(template.len());
    for segment in segments(template) {
        match segment {
            Segment::Literal(text) => out.push_str(text),
            Segment::Placeholder(name) => match lookup(name) {
                Some(value) => out.push_str(&value),
                None => return Err(name.to_owned()),
            },
        }
    }
    Ok(out)
}
