//! In-place edits of JSON string values that leave every other byte alone.

use std::ops::Range;

use serde::Deserialize;
use serde_json::value::RawValue;

/// A JSON value to overwrite, located by its byte range in the document.
#[derive(Debug)]
pub(crate) struct Splice {
    pub range: Range<usize>,
    pub replacement: String,
}

/// Byte range of `inner`, which must be a subslice of `outer`.
fn offset_in(outer: &str, inner: &RawValue) -> Range<usize> {
    let inner = inner.get();
    let start = inner.as_ptr() as usize - outer.as_ptr() as usize;
    debug_assert!(start + inner.len() <= outer.len());
    start..start + inner.len()
}

pub(crate) fn apply(src: &str, mut splices: Vec<Splice>) -> String {
    splices.sort_by_key(|s| s.range.start);
    let mut out = String::with_capacity(src.len());
    let mut copied = 0;
    for s in splices {
        out.push_str(&src[copied..s.range.start]);
        out.push_str(&s.replacement);
        copied = s.range.end;
    }
    out.push_str(&src[copied..]);
    out
}

/// A string-valued JSON slot in the document.
#[derive(Debug)]
pub(crate) struct TextSlot {
    pub range: Range<usize>,
    pub text: String,
}

impl TextSlot {
    fn read(doc: &str, raw: &RawValue) -> Option<Self> {
        let text: String = serde_json::from_str(raw.get()).ok()?;
        Some(Self { range: offset_in(doc, raw), text })
    }

    pub fn replace_with(&self, text: &str) -> Splice {
        Splice {
            range: self.range.clone(),
            replacement: serde_json::to_string(text).expect("strings always serialize"),
        }
    }
}

#[derive(Deserialize)]
struct Messages<'a> {
    #[serde(borrow)]
    messages: Vec<&'a RawValue>,
}

#[derive(Deserialize)]
struct Message<'a> {
    #[serde(default)]
    role: String,
    #[serde(borrow, default)]
    content: Option<&'a RawValue>,
}

#[derive(Deserialize)]
struct Part<'a> {
    #[serde(rename = "type", default)]
    kind: String,
    #[serde(borrow, default)]
    text: Option<&'a RawValue>,
}

/// Text held in `content`: either a string or an array of `{"type": "text"}`
/// parts.
fn content_slots(doc: &str, content: &RawValue, out: &mut Vec<TextSlot>) {
    let s = content.get();
    if s.starts_with('"') {
        out.extend(TextSlot::read(doc, content));
    } else if s.starts_with('[') {
        let Ok(parts) = serde_json::from_str::<Vec<&RawValue>>(s) else {
            return;
        };
        for part in parts {
            if let Ok(Part { kind, text: Some(text) }) = serde_json::from_str::<Part<'_>>(part.get()) {
                if kind == "text" {
                    out.extend(TextSlot::read(doc, text));
                }
            }
        }
    }
}

/// Text slots of every message with the given role in a chat request.
pub(crate) fn request_slots(doc: &str, role: &str) -> Result<Vec<TextSlot>, serde_json::Error> {
    let parsed: Messages<'_> = serde_json::from_str(doc)?;
    let mut out = Vec::new();
    for raw in parsed.messages {
        let m: Message<'_> = serde_json::from_str(raw.get())?;
        if m.role == role {
            if let Some(c) = m.content {
                content_slots(doc, c, &mut out);
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct Completion<'a> {
    #[serde(borrow, default)]
    choices: Vec<&'a RawValue>,
}

#[derive(Deserialize)]
struct Choice<'a> {
    #[serde(borrow, default)]
    message: Option<&'a RawValue>,
}

/// Text slots of assistant messages in a chat completion response.
pub(crate) fn response_slots(doc: &str) -> Result<Vec<TextSlot>, serde_json::Error> {
    let parsed: Completion<'_> = serde_json::from_str(doc)?;
    let mut out = Vec::new();
    for raw in parsed.choices {
        let Ok(Choice { message: Some(msg) }) = serde_json::from_str::<Choice<'_>>(raw.get()) else {
            continue;
        };
        let Ok(m) = serde_json::from_str::<Message<'_>>(msg.get()) else {
            continue;
        };
        if m.role.is_empty() || m.role == "assistant" {
            if let Some(c) = m.content {
                content_slots(doc, c, &mut out);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_user_text_and_splices_in_place() {
        let doc = r#"{ "model":"m",  "messages":[{"role":"system","content":"Be brief, Sarah."},
            {"role":"user","content":"Hi, I am Sarah A"},
            {"role":"user","content":[{"type":"image_url","image_url":{"url":"x"}},{"type":"text","text":"Sarah again"}]}],
            "temperature": 1.00 }"#;
        let slots = request_slots(doc, "user").unwrap();
        let texts: Vec<&str> = slots.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["Hi, I am Sarah A", "Sarah again"]);
        let edits = slots.iter().map(|s| s.replace_with(&s.text.replace("Sarah", "Meadow"))).collect();
        let out = apply(doc, edits);
        assert_eq!(
            out,
            doc.replace(r#""Hi, I am Sarah A""#, r#""Hi, I am Meadow A""#)
                .replace(r#""Sarah again""#, r#""Meadow again""#)
        );
        assert!(out.contains("Be brief, Sarah."));
        assert!(out.contains("1.00 }"));
    }

    #[test]
    fn response_slots_cover_choices() {
        let doc = r#"{"id":"c1","choices":[{"index":0,"message":{"role":"assistant","content":"Hello Meadow"}},{"index":1,"message":{"role":"assistant","content":null}}]}"#;
        let slots = response_slots(doc).unwrap();
        assert_eq!(slots.len(), 1);
        assert_eq!(slots[0].text, "Hello Meadow");
        assert!(response_slots("[1,2]").is_err());
        assert!(response_slots(r#"{"object":"list"}"#).unwrap().is_empty());
    }

    #[test]
    fn malformed_requests() {
        assert!(request_slots("{", "user").is_err());
        assert!(request_slots(r#"{"model":"m"}"#, "user").is_err());
    }
}
