//! Paragraph extraction from semi-structured HTML exports.
//!
//! Only `<p>` and `<li>` elements produce paragraphs. The scanner is a single
//! forward pass: it never fails, and unbalanced markup yields whatever text
//! can be attributed to an open paragraph element.

/// Tags that separate words when stripped from inside a paragraph.
const BLOCK_TAGS: &[&str] = &[
    "br", "div", "td", "th", "tr", "table", "ul", "ol", "h1", "h2", "h3", "h4", "h5", "h6",
    "section", "blockquote", "hr",
];

/// Returns the inner text of each `<p>`/`<li>` element in document order,
/// with tags stripped, entities decoded and whitespace collapsed. Empty
/// paragraphs are dropped.
pub fn extract_paragraphs(html: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Option<String> = None;
    let mut rest = html;

    while !rest.is_empty() {
        let Some(lt) = rest.find('<') else {
            if let Some(buf) = current.as_mut() {
                buf.push_str(rest);
            }
            break;
        };
        if let Some(buf) = current.as_mut() {
            buf.push_str(&rest[..lt]);
        }
        rest = &rest[lt..];

        if rest.starts_with("<!--") {
            rest = match rest.find("-->") {
                Some(end) => &rest[end + 3..],
                None => "",
            };
            continue;
        }

        let looks_like_tag = rest[1..]
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '/' || c == '!');
        let close = rest.find('>');
        let (true, Some(close)) = (looks_like_tag, close) else {
            // A stray '<' is text.
            if let Some(buf) = current.as_mut() {
                buf.push('<');
            }
            rest = &rest[1..];
            continue;
        };

        let inner = &rest[1..close];
        rest = &rest[close + 1..];
        let (closing, body) = match inner.strip_prefix('/') {
            Some(b) => (true, b),
            None => (false, inner),
        };
        let name: String = body
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();

        match name.as_str() {
            "p" | "li" => {
                flush(&mut current, &mut out);
                if !closing {
                    current = Some(String::new());
                }
            }
            other => {
                if let Some(buf) = current.as_mut() {
                    if BLOCK_TAGS.contains(&other) {
                        buf.push(' ');
                    }
                }
            }
        }
    }
    flush(&mut current, &mut out);
    out
}

fn flush(current: &mut Option<String>, out: &mut Vec<String>) {
    if let Some(raw) = current.take() {
        let text = normalize_whitespace(&decode_entities(&raw));
        if !text.is_empty() {
            out.push(text);
        }
    }
}

fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Decodes the named entities `amp lt gt quot apos nbsp` and numeric
/// references. Unknown or malformed entities are kept verbatim.
pub fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let decoded = rest
            .find(';')
            .filter(|&semi| semi <= 12)
            .and_then(|semi| decode_one(&rest[1..semi]).map(|c| (c, semi)));
        match decoded {
            Some((c, semi)) => {
                out.push(c);
                rest = &rest[semi + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn decode_one(entity: &str) -> Option<char> {
    match entity {
        "amp" => Some('&'),
        "lt" => Some('<'),
        "gt" => Some('>'),
        "quot" => Some('"'),
        "apos" => Some('\''),
        "nbsp" => Some('\u{a0}'),
        _ => {
            let num = entity.strip_prefix('#')?;
            let code = match num.strip_prefix(['x', 'X']) {
                Some(hex) => u32::from_str_radix(hex, 16).ok()?,
                None => num.parse::<u32>().ok()?,
            };
            char::from_u32(code)
        }
    }
}
