//! Binary PGM (P5) parsing and canonical writing.
//!
//! Only the binary graymap subset is supported: magic `P5`, whitespace
//! separated width/height/maxval with `#` comments permitted in the header,
//! a single whitespace byte, then raw samples. Maxval is restricted to 255
//! (one byte per sample) or 65535 (two bytes, big-endian). The writer emits
//! the canonical form `P5\n<w> <h>\n<maxval>\n<samples>` so encode/parse is
//! an exact round trip.

use super::{CorpusError, ImageSlice};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        Some(b)
    }

    fn skip_whitespace_and_comments(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(c) = self.bump() {
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    /// Next run of non-whitespace header bytes.
    fn token(&mut self) -> Result<&'a [u8], CorpusError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(CorpusError::BadHeader("unexpected end of header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u64, CorpusError> {
        let tok = self.token()?;
        let text = std::str::from_utf8(tok)
            .map_err(|_| CorpusError::BadHeader(format!("{what} is not ASCII")))?;
        text.parse::<u64>()
            .map_err(|_| CorpusError::BadHeader(format!("{what} is not a number: {text:?}")))
    }
}

// Guards against absurd headers allocating unbounded memory.
const MAX_PIXELS: u64 = 1 << 30;

/// Decodes a binary PGM. The slice id is supplied by the caller (normally
/// the file stem) because the format itself carries none.
pub fn parse_pgm(bytes: &[u8], id: &str) -> Result<ImageSlice, CorpusError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.token().map_err(|_| CorpusError::BadMagic)?;
    if magic != b"P5" {
        return Err(CorpusError::BadMagic);
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let max_value = cur.number("max value")?;
    if width == 0 || height == 0 {
        return Err(CorpusError::BadHeader(
            "width and height must be positive".into(),
        ));
    }
    if width * height > MAX_PIXELS {
        return Err(CorpusError::BadHeader("image too large".into()));
    }
    if max_value != 255 && max_value != 65535 {
        return Err(CorpusError::UnsupportedMaxVal(max_value));
    }
    match cur.bump() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => {
            return Err(CorpusError::BadHeader(
                "expected single whitespace after max value".into(),
            ))
        }
    }

    let count = (width * height) as usize;
    let payload = &bytes[cur.pos..];
    let bytes_per = if max_value == 255 { 1 } else { 2 };
    if payload.len() < count * bytes_per {
        return Err(CorpusError::TruncatedPayload {
            expected: count,
            got: payload.len() / bytes_per,
        });
    }
    if payload.len() > count * bytes_per {
        return Err(CorpusError::TrailingBytes(payload.len() - count * bytes_per));
    }

    let pixels: Vec<u32> = if bytes_per == 1 {
        payload.iter().map(|&b| b as u32).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|pair| ((pair[0] as u32) << 8) | pair[1] as u32)
            .collect()
    };

    ImageSlice::new(id, width as usize, height as usize, max_value as u32, pixels)
}

/// Canonical binary encoding; deterministic and byte-exact.
pub fn write_pgm(slice: &ImageSlice) -> Vec<u8> {
    let header = format!(
        "P5\n{} {}\n{}\n",
        slice.width, slice.height, slice.max_value
    );
    let mut out = Vec::with_capacity(
        header.len() + slice.pixels.len() * if slice.max_value == 255 { 1 } else { 2 },
    );
    out.extend_from_slice(header.as_bytes());
    if slice.max_value == 255 {
        out.extend(slice.pixels.iter().map(|&p| p as u8));
    } else {
        for &p in &slice.pixels {
            out.push((p >> 8) as u8);
            out.push((p & 0xff) as u8);
        }
    }
    out
}
