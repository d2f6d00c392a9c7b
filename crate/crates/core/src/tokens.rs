//! The fixed 22-token vocabulary shared by the policy and the environment.

use std::fmt;

/// Token index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub u8);

pub const VOCAB_SIZE: usize = 22;
pub const NUM_ACTION_TOKENS: usize = 17;

/// Action tokens "1".."10", then operators, then structural tokens.
pub const TOKEN_STRINGS: [&str; VOCAB_SIZE] = [
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "+", "-", "*", "/", "(", ")", "=", "BOT",
    "EOT", "BOA", "EOA", "PAD",
];

pub const PLUS: Token = Token(10);
pub const MINUS: Token = Token(11);
pub const TIMES: Token = Token(12);
pub const DIVIDE: Token = Token(13);
pub const LPAREN: Token = Token(14);
pub const RPAREN: Token = Token(15);
pub const EQUALS: Token = Token(16);
pub const BOT: Token = Token(17);
pub const EOT: Token = Token(18);
pub const BOA: Token = Token(19);
pub const EOA: Token = Token(20);
pub const PAD: Token = Token(21);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_str(self) -> &'static str {
        TOKEN_STRINGS[self.index()]
    }

    pub fn from_str(s: &str) -> Option<Token> {
        TOKEN_STRINGS
            .iter()
            .position(|&t| t == s)
            .map(|i| Token(i as u8))
    }

    /// Number token for a card value in 1..=10.
    pub fn number(value: u8) -> Token {
        assert!((1..=10).contains(&value), "card value {value} out of range");
        Token(value - 1)
    }

    pub fn is_action(self) -> bool {
        self.index() < NUM_ACTION_TOKENS
    }

    pub fn is_number(self) -> bool {
        self.index() < 10
    }

    /// Card value carried by a number token.
    pub fn number_value(self) -> Option<u8> {
        self.is_number().then_some(self.0 + 1)
    }

    pub fn is_operator(self) -> bool {
        matches!(self, PLUS | MINUS | TIMES | DIVIDE)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.as_str()).collect()
}
