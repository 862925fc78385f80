//! Rule-based parser for rendered MediaWiki pages.
//!
//! Only the structure the pipeline needs is recovered: `h2`–`h4` headings
//! become a section tree, `p` elements become paragraphs and `img` elements
//! attach to the innermost open section. Edit links (`mw-editsection`),
//! citation markers (`sup.reference`), scripts and styles are dropped.
//! Content before the first heading (the lead) is discarded unless the page
//! has no headings at all, in which case it forms one implicit section named
//! after the page title.

use log::warn;

use super::{PageDoc, Section};
use crate::kg::ImageRef;

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open { name: String, attrs: Vec<(String, String)> },
    Close { name: String },
    Text(String),
}

const VOID_ELEMENTS: [&str; 8] = ["img", "br", "hr", "meta", "link", "input", "source", "wbr"];

fn tokenize_html(html: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut rest = html;
    let mut text = String::new();

    let flush = |text: &mut String, tokens: &mut Vec<Token>| {
        if !text.is_empty() {
            tokens.push(Token::Text(std::mem::take(text)));
        }
    };

    while let Some(lt) = rest.find('<') {
        text.push_str(&rest[..lt]);
        rest = &rest[lt..];

        if let Some(body) = rest.strip_prefix("<!--") {
            flush(&mut text, &mut tokens);
            rest = body.find("-->").map_or("", |end| &body[end + 3..]);
            continue;
        }
        if rest.starts_with("<!") || rest.starts_with("<?") {
            flush(&mut text, &mut tokens);
            rest = rest.find('>').map_or("", |end| &rest[end + 1..]);
            continue;
        }

        let closing = rest[1..].starts_with('/');
        let name_start = if closing { 2 } else { 1 };
        let name_len = rest[name_start..]
            .find(|c: char| !c.is_ascii_alphanumeric())
            .unwrap_or(rest.len() - name_start);
        if name_len == 0 {
            // A bare `<` in text.
            text.push('<');
            rest = &rest[1..];
            continue;
        }
        let Some(end) = find_tag_end(rest) else {
            // Unterminated tag at end of input.
            text.push_str(rest);
            rest = "";
            break;
        };
        flush(&mut text, &mut tokens);
        let name = rest[name_start..name_start + name_len].to_ascii_lowercase();
        let inner = &rest[name_start + name_len..end];
        rest = &rest[end + 1..];

        if closing {
            tokens.push(Token::Close { name });
            continue;
        }
        let attrs = parse_attrs(inner);
        let raw_text = name == "script" || name == "style";
        let self_closing = inner.trim_end().ends_with('/');
        tokens.push(Token::Open {
            name: name.clone(),
            attrs,
        });
        if raw_text {
            let close = format!("</{name}");
            let lower = rest.to_ascii_lowercase();
            let stop = lower.find(&close).unwrap_or(rest.len());
            rest = &rest[stop..];
        } else if self_closing && !VOID_ELEMENTS.contains(&name.as_str()) {
            tokens.push(Token::Close { name });
        }
    }
    text.push_str(rest);
    flush(&mut text, &mut tokens);
    tokens
}

/// Index of the `>` closing the tag that starts at `s[0]`, honouring quotes.
fn find_tag_end(s: &str) -> Option<usize> {
    let mut quote = None;
    for (i, c) in s.char_indices().skip(1) {
        match (quote, c) {
            (None, '"' | '\'') => quote = Some(c),
            (Some(q), c) if c == q => quote = None,
            (None, '>') => return Some(i),
            _ => {}
        }
    }
    None
}

fn parse_attrs(inner: &str) -> Vec<(String, String)> {
    let mut attrs = Vec::new();
    let mut chars = inner.trim_end_matches('/').char_indices().peekable();
    let src = inner;
    while let Some(&(start, c)) = chars.peek() {
        if c.is_whitespace() || c == '/' {
            chars.next();
            continue;
        }
        let mut end = start;
        while let Some(&(i, c)) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            end = i + c.len_utf8();
            chars.next();
        }
        let key = src[start..end].to_ascii_lowercase();
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
            chars.next();
        }
        let mut value = String::new();
        if matches!(chars.peek(), Some((_, '='))) {
            chars.next();
            while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
                chars.next();
            }
            match chars.peek().copied() {
                Some((_, q @ ('"' | '\''))) => {
                    chars.next();
                    for (_, c) in chars.by_ref() {
                        if c == q {
                            break;
                        }
                        value.push(c);
                    }
                }
                _ => {
                    while let Some(&(_, c)) = chars.peek() {
                        if c.is_whitespace() {
                            break;
                        }
                        value.push(c);
                        chars.next();
                    }
                }
            }
        }
        if !key.is_empty() {
            attrs.push((key, decode_entities(&value)));
        }
    }
    attrs
}

fn attr<'a>(attrs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn has_class(attrs: &[(String, String)], class: &str) -> bool {
    attr(attrs, "class").is_some_and(|c| c.split_whitespace().any(|c| c == class))
}

pub(crate) fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let decoded = rest[1..].find(';').filter(|&semi| semi <= 10).and_then(|semi| {
            let entity = &rest[1..1 + semi];
            let ch = match entity {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" | "#39" => Some('\''),
                "nbsp" => Some(' '),
                "ndash" => Some('\u{2013}'),
                "mdash" => Some('\u{2014}'),
                _ => entity
                    .strip_prefix("#x")
                    .or_else(|| entity.strip_prefix("#X"))
                    .and_then(|hex| u32::from_str_radix(hex, 16).ok())
                    .or_else(|| entity.strip_prefix('#').and_then(|d| d.parse().ok()))
                    .and_then(char::from_u32),
            };
            ch.map(|c| (c, semi + 2))
        });
        match decoded {
            Some((c, consumed)) => {
                out.push(c);
                rest = &rest[consumed..];
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

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Stable image id derived from an image URL: the file name, looking through
/// MediaWiki thumbnail paths (`.../thumb/a/ab/File.jpg/220px-File.jpg`).
pub fn image_id_from_src(src: &str) -> String {
    let path = src.split(['?', '#']).next().unwrap_or(src);
    let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
    if let Some(pos) = segments.iter().position(|s| *s == "thumb") {
        // thumb/<h1>/<h2>/<file>/<size-file>
        if let Some(file) = segments.get(pos + 3) {
            return (*file).to_string();
        }
    }
    segments.last().map_or_else(|| src.to_string(), |s| (*s).to_string())
}

fn locator_from_src(src: &str) -> String {
    if src.starts_with("//") {
        format!("https:{src}")
    } else {
        src.to_string()
    }
}

fn heading_level(name: &str) -> Option<u8> {
    match name {
        "h2" => Some(2),
        "h3" => Some(3),
        "h4" => Some(4),
        _ => None,
    }
}

#[derive(Default)]
struct Builder {
    roots: Vec<Section>,
    open: Vec<Section>,
    lead_paragraphs: Vec<String>,
    lead_images: Vec<ImageRef>,
    warnings: Vec<String>,
}

impl Builder {
    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }

    fn close_until(&mut self, level: u8) {
        while self.open.last().is_some_and(|s| s.level >= level) {
            let done = self.open.pop().expect("checked non-empty");
            match self.open.last_mut() {
                Some(parent) => parent.children.push(done),
                None => self.roots.push(done),
            }
        }
    }

    fn start_section(&mut self, raw_level: u8, heading: String) {
        self.close_until(raw_level);
        let level = self.open.last().map_or(2, |s| s.level + 1);
        if level != raw_level {
            self.warn(format!(
                "heading `{heading}` at h{raw_level} has no h{} parent; treated as level {level}",
                raw_level - 1
            ));
        }
        self.open.push(Section {
            heading,
            level,
            paragraphs: Vec::new(),
            images: Vec::new(),
            children: Vec::new(),
        });
    }

    fn add_paragraph(&mut self, text: String) {
        match self.open.last_mut() {
            Some(s) => s.paragraphs.push(text),
            None => self.lead_paragraphs.push(text),
        }
    }

    fn add_image(&mut self, image: ImageRef) {
        let images = match self.open.last_mut() {
            Some(s) => &mut s.images,
            None => &mut self.lead_images,
        };
        if !images.iter().any(|i| i.image_id == image.image_id) {
            images.push(image);
        }
    }

    fn finish(mut self, title: &str, entity_id: &str) -> (Vec<Section>, Vec<String>) {
        self.close_until(0);
        if self.roots.is_empty() && !(self.lead_paragraphs.is_empty() && self.lead_images.is_empty()) {
            let heading = if title.is_empty() { entity_id } else { title };
            self.roots.push(Section {
                heading: heading.to_string(),
                level: 2,
                paragraphs: self.lead_paragraphs,
                images: self.lead_images,
                children: Vec::new(),
            });
        }
        (self.roots, self.warnings)
    }
}

/// What the parser is currently collecting text for.
enum Capture {
    None,
    Heading(u8, String),
    Paragraph(String),
    Title(String),
    PageHeading(String),
}

/// Parses a rendered page, returning the document and any markup warnings.
pub fn parse_page_html_with_warnings(html: &str, entity_id: &str) -> (PageDoc, Vec<String>) {
    let mut b = Builder::default();
    let mut capture = Capture::None;
    // Element whose content is being skipped, with its nesting depth.
    let mut skip: Option<(String, usize)> = None;
    let mut doc_title = String::new();
    let mut page_heading = String::new();

    for token in tokenize_html(html) {
        if let Some((name, depth)) = &mut skip {
            match &token {
                Token::Open { name: n, .. } if n == name && !VOID_ELEMENTS.contains(&n.as_str()) => *depth += 1,
                Token::Close { name: n } if n == name => {
                    *depth -= 1;
                    if *depth == 0 {
                        skip = None;
                    }
                }
                _ => {}
            }
            continue;
        }

        match token {
            Token::Text(text) => match &mut capture {
                Capture::Heading(_, buf)
                | Capture::Paragraph(buf)
                | Capture::Title(buf)
                | Capture::PageHeading(buf) => buf.push_str(&decode_entities(&text)),
                Capture::None => {}
            },
            Token::Open { name, attrs } => {
                let skipped = name == "script"
                    || name == "style"
                    || (name == "sup" && has_class(&attrs, "reference"))
                    || has_class(&attrs, "mw-editsection");
                if skipped {
                    skip = Some((name, 1));
                    continue;
                }
                if let Some(level) = heading_level(&name) {
                    flush_capture(&mut b, &mut capture, &mut doc_title, &mut page_heading, true);
                    capture = Capture::Heading(level, String::new());
                    continue;
                }
                match name.as_str() {
                    "p" => {
                        flush_capture(&mut b, &mut capture, &mut doc_title, &mut page_heading, true);
                        capture = Capture::Paragraph(String::new());
                    }
                    "title" => {
                        flush_capture(&mut b, &mut capture, &mut doc_title, &mut page_heading, true);
                        capture = Capture::Title(String::new());
                    }
                    "h1" => {
                        flush_capture(&mut b, &mut capture, &mut doc_title, &mut page_heading, true);
                        capture = Capture::PageHeading(String::new());
                    }
                    "br" => {
                        if let Capture::Paragraph(buf) = &mut capture {
                            buf.push(' ');
                        }
                    }
                    "img" => {
                        if let Some(src) = attr(&attrs, "src").filter(|s| !s.is_empty()) {
                            b.add_image(ImageRef::wikipedia(image_id_from_src(src), locator_from_src(src)));
                        }
                    }
                    _ => {}
                }
            }
            Token::Close { name } => {
                let closes_capture = match &capture {
                    Capture::Heading(level, _) => heading_level(&name).map(|l| (l == *level, true)),
                    Capture::Paragraph(_) => (name == "p").then_some((true, true)),
                    Capture::Title(_) => (name == "title").then_some((true, true)),
                    Capture::PageHeading(_) => (name == "h1").then_some((true, true)),
                    Capture::None => None,
                };
                match closes_capture {
                    Some((matched, _)) => {
                        if !matched {
                            b.warn(format!("mismatched closing tag </{name}>"));
                        }
                        flush_capture(&mut b, &mut capture, &mut doc_title, &mut page_heading, false);
                    }
                    None => {
                        if name == "p" || heading_level(&name).is_some() {
                            b.warn(format!("closing tag </{name}> without matching open tag"));
                        }
                    }
                }
            }
        }
    }
    if skip.is_some() {
        b.warn("input ended inside a skipped element".to_string());
    }
    flush_capture(&mut b, &mut capture, &mut doc_title, &mut page_heading, true);

    let title = if !page_heading.is_empty() {
        page_heading
    } else {
        doc_title
            .strip_suffix(" - Wikipedia")
            .map(str::to_string)
            .unwrap_or(doc_title)
    };
    let (sections, warnings) = b.finish(&title, entity_id);
    (
        PageDoc {
            entity_id: entity_id.to_string(),
            title,
            sections,
        },
        warnings,
    )
}

fn flush_capture(
    b: &mut Builder,
    capture: &mut Capture,
    doc_title: &mut String,
    page_heading: &mut String,
    unterminated: bool,
) {
    let current = std::mem::replace(capture, Capture::None);
    let label = match &current {
        Capture::None => return,
        Capture::Heading(level, _) => format!("h{level}"),
        Capture::Paragraph(_) => "p".into(),
        Capture::Title(_) => "title".into(),
        Capture::PageHeading(_) => "h1".into(),
    };
    if unterminated {
        b.warn(format!("<{label}> was not closed"));
    }
    match current {
        Capture::None => {}
        Capture::Heading(level, text) => {
            let heading = collapse_whitespace(&text);
            if heading.is_empty() {
                b.warn(format!("empty h{level} heading ignored"));
            } else {
                b.start_section(level, heading);
            }
        }
        Capture::Paragraph(text) => {
            let text = collapse_whitespace(&text);
            if !text.is_empty() {
                b.add_paragraph(text);
            }
        }
        Capture::Title(text) => *doc_title = collapse_whitespace(&text),
        Capture::PageHeading(text) => *page_heading = collapse_whitespace(&text),
    }
}
