use crate::error::{Error, Result};

/// Reserved end-of-sequence symbol.
pub const EOS_CHAR: char = '$';

// Digits, grammar punctuation, the letters of "has k digits." and "END", EOS.
const SYMBOLS: &str = "0123456789 \n[],+=->.ACENDadghist$";

/// Character-level vocabulary. Ids are the positions in the symbol table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    id_of: [Option<u32>; 128],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::scratchpad()
    }
}

impl Vocabulary {
    pub fn scratchpad() -> Self {
        let symbols: Vec<char> = SYMBOLS.chars().collect();
        let mut id_of = [None; 128];
        for (i, &c) in symbols.iter().enumerate() {
            debug_assert!(id_of[c as usize].is_none(), "duplicate symbol {c:?}");
            id_of[c as usize] = Some(i as u32);
        }
        Vocabulary { symbols, id_of }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn eos_id(&self) -> u32 {
        self.id_of[EOS_CHAR as usize].expect("EOS in vocabulary")
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        if c.is_ascii() {
            self.id_of[c as usize]
        } else {
            None
        }
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.symbols.get(id as usize).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| self.id_of(ch).ok_or(Error::UnknownChar { ch, position }))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .enumerate()
            .map(|(position, &id)| {
                self.char_of(id).ok_or(Error::TokenOutOfRange {
                    id,
                    position,
                    vocab_size: self.size(),
                })
            })
            .collect()
    }
}
