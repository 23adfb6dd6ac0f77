//! Maps JSON pointers to line/column positions in the source text, so
//! semantic errors found after deserialization can point at their origin.

use std::collections::BTreeMap;

/// 1-based line and column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

/// Position of every value in a JSON document, keyed by pointer
/// (`""` is the root; `/faults/0/node` a nested value).
#[derive(Clone, Debug, Default)]
pub struct SpanIndex {
    spans: BTreeMap<String, Pos>,
}

impl SpanIndex {
    /// Indexes `text`. Malformed input yields a partial index; parse errors
    /// are reported by the real parser.
    pub fn build(text: &str) -> Self {
        let mut s = Scanner {
            bytes: text.as_bytes(),
            i: 0,
            line: 1,
            col: 1,
            spans: BTreeMap::new(),
        };
        s.value(String::new());
        SpanIndex { spans: s.spans }
    }

    /// Position of `pointer`, falling back to its nearest indexed ancestor.
    pub fn locate(&self, pointer: &str) -> Pos {
        let mut p = pointer;
        loop {
            if let Some(pos) = self.spans.get(p) {
                return *pos;
            }
            match p.rfind('/') {
                Some(i) => p = &p[..i],
                None => return self.spans.get("").copied().unwrap_or(Pos { line: 1, col: 1 }),
            }
        }
    }
}

struct Scanner<'a> {
    bytes: &'a [u8],
    i: usize,
    line: usize,
    col: usize,
    spans: BTreeMap<String, Pos>,
}

impl Scanner<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.i).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.i += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else if b & 0xC0 != 0x80 {
            // count characters, not UTF-8 continuation bytes
            self.col += 1;
        }
        Some(b)
    }

    fn ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.bump();
        }
    }

    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn value(&mut self, ptr: String) -> Option<()> {
        self.ws();
        self.spans.insert(ptr.clone(), self.pos());
        match self.peek()? {
            b'{' => {
                self.bump();
                loop {
                    self.ws();
                    match self.peek()? {
                        b'}' => {
                            self.bump();
                            return Some(());
                        }
                        b',' => {
                            self.bump();
                        }
                        b'"' => {
                            let key = self.string()?;
                            self.ws();
                            if self.bump()? != b':' {
                                return None;
                            }
                            let esc = key.replace('~', "~0").replace('/', "~1");
                            self.value(format!("{ptr}/{esc}"))?;
                        }
                        _ => return None,
                    }
                }
            }
            b'[' => {
                self.bump();
                let mut idx = 0;
                loop {
                    self.ws();
                    match self.peek()? {
                        b']' => {
                            self.bump();
                            return Some(());
                        }
                        b',' => {
                            self.bump();
                        }
                        _ => {
                            self.value(format!("{ptr}/{idx}"))?;
                            idx += 1;
                        }
                    }
                }
            }
            b'"' => self.string().map(|_| ()),
            _ => {
                while let Some(b) = self.peek() {
                    if matches!(b, b',' | b'}' | b']' | b' ' | b'\t' | b'\n' | b'\r') {
                        break;
                    }
                    self.bump();
                }
                Some(())
            }
        }
    }

    fn string(&mut self) -> Option<String> {
        self.bump();
        let start = self.i;
        loop {
            match self.bump()? {
                b'\\' => {
                    self.bump()?;
                }
                b'"' => break,
                _ => {}
            }
        }
        let raw = std::str::from_utf8(&self.bytes[start..self.i - 1]).ok()?;
        Some(raw.to_string())
    }
}
