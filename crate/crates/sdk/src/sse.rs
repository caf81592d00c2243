//! Server-sent-event framing. Every event carries an id, a name, and one
//! JSON data line; the encoder emits exactly that shape and the parser
//! accepts it back plus standard SSE comment lines.

/// One framed event. `id` is the per-delegation sequence number; consumers
/// resume with `Last-Event-ID` set to the last id they saw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SseFrame {
    pub id: u64,
    pub event: String,
    pub data: String,
}

/// Wire form: `id: <n>\nevent: <name>\ndata: <json>\n\n`.
pub fn encode_frame(id: u64, event: &str, data: &str) -> String {
    format!("id: {id}\nevent: {event}\ndata: {data}\n\n")
}

/// Incremental SSE parser. Feed it raw bytes as they arrive; it yields every
/// complete frame and buffers the rest. Frames without an id (comments,
/// keep-alives) are dropped.
#[derive(Debug, Default)]
pub struct SseParser {
    buf: Vec<u8>,
}

impl SseParser {
    pub fn new() -> Self {
        SseParser::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<SseFrame> {
        self.buf.extend_from_slice(bytes);
        let mut frames = Vec::new();
        // A frame ends at a blank line. Only complete frames are parsed, so
        // a chunk boundary can never split a UTF-8 sequence we look at.
        while let Some(pos) = find_blank_line(&self.buf) {
            let block: Vec<u8> = self.buf.drain(..pos + 2).collect();
            if let Some(frame) = parse_block(&block[..pos]) {
                frames.push(frame);
            }
        }
        frames
    }
}

fn find_blank_line(buf: &[u8]) -> Option<usize> {
    buf.windows(2).position(|w| w == b"\n\n")
}

fn parse_block(block: &[u8]) -> Option<SseFrame> {
    let text = std::str::from_utf8(block).ok()?;
    let mut id = None;
    let mut event = None;
    let mut data_lines: Vec<&str> = Vec::new();
    for line in text.split('\n') {
        if line.starts_with(':') {
            continue;
        }
        let (field, value) = match line.split_once(':') {
            Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
            None => (line, ""),
        };
        match field {
            "id" => id = value.parse::<u64>().ok(),
            "event" => event = Some(value.to_string()),
            "data" => data_lines.push(value),
            _ => {}
        }
    }
    Some(SseFrame {
        id: id?,
        event: event.unwrap_or_else(|| "message".to_string()),
        data: data_lines.join("\n"),
    })
}
