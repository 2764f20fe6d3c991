//! Character-level tokenizer over a fixed printable alphabet.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const NEWLINE: u32 = 4;
const FIRST_PRINTABLE: u32 = 5;

/// Size of the base vocabulary: 4 control ids, `\n`, and ASCII 0x20..=0x7e.
pub const BASE_VOCAB: usize = 100;

/// Ids appended past the base vocabulary by the cross-attention variant.
pub const TS_TOKEN: u32 = BASE_VOCAB as u32;
pub const END_OF_CHUNK_TOKEN: u32 = BASE_VOCAB as u32 + 1;

pub const TS_LITERAL: &str = "<TS>";
pub const END_OF_CHUNK_LITERAL: &str = "<endofchunk>";

#[derive(Debug, Clone, Copy, Default)]
pub struct CharTokenizer;

impl CharTokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(encode_char).collect()
    }

    /// Like [`encode`](Self::encode) but maps the literals `<TS>` and
    /// `<endofchunk>` to their special ids.
    pub fn encode_marked(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix(TS_LITERAL) {
                out.push(TS_TOKEN);
                rest = r;
            } else if let Some(r) = rest.strip_prefix(END_OF_CHUNK_LITERAL) {
                out.push(END_OF_CHUNK_TOKEN);
                rest = r;
            } else {
                let c = rest.chars().next().unwrap();
                out.push(encode_char(c));
                rest = &rest[c.len_utf8()..];
            }
        }
        out
    }

    /// Decode ids to text. Control ids are dropped; special ids are
    /// rendered as their literals.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                NEWLINE => s.push('\n'),
                TS_TOKEN => s.push_str(TS_LITERAL),
                END_OF_CHUNK_TOKEN => s.push_str(END_OF_CHUNK_LITERAL),
                id if (FIRST_PRINTABLE..BASE_VOCAB as u32).contains(&id) => {
                    s.push(char::from_u32(id - FIRST_PRINTABLE + 0x20).unwrap())
                }
                UNK => s.push('?'),
                _ => {}
            }
        }
        s
    }
}

fn encode_char(c: char) -> u32 {
    match c {
        '\n' => NEWLINE,
        ' '..='~' => c as u32 - 0x20 + FIRST_PRINTABLE,
        _ => UNK,
    }
}
