use std::fmt;

use serde::{Deserialize, Serialize};

use super::ConceptError;

/// Prompt length: template, subject, style-or-PAD, PAD.
pub const PROMPT_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Template,
    Subject,
    Style,
    Pad,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub name: String,
    pub role: Role,
}

/// Dense token table. Ids are positions in `tokens`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<Token>,
}

impl Vocab {
    pub fn new(tokens: Vec<Token>) -> Result<Self, ConceptError> {
        let pads = tokens.iter().filter(|t| t.role == Role::Pad).count();
        if pads != 1 {
            return Err(ConceptError::Invalid(format!("vocab needs exactly one PAD token, found {pads}")));
        }
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].iter().any(|u| u.name == t.name) {
                return Err(ConceptError::Invalid(format!("duplicate token {}", t.name)));
            }
        }
        Ok(Self { tokens })
    }

    /// 8 templates, the subjects of the default concept map, 3 styles, PAD.
    pub fn standard() -> Self {
        let mut tokens: Vec<Token> = (0..8).map(|i| Token { name: format!("tmpl{i}"), role: Role::Template }).collect();
        for s in [
            "cat", "grumpy", "tabby", "siamese", "persian", "dog", "corgi", "husky", "poodle", "beagle", "poster",
            "memo",
        ] {
            tokens.push(Token { name: s.into(), role: Role::Subject });
        }
        for s in ["plain", "vangogh", "monet"] {
            tokens.push(Token { name: s.into(), role: Role::Style });
        }
        tokens.push(Token { name: "<pad>".into(), role: Role::Pad });
        Self::new(tokens).expect("standard vocab is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<u32, ConceptError> {
        self.tokens
            .iter()
            .position(|t| t.name == name)
            .map(|i| i as u32)
            .ok_or_else(|| ConceptError::UnknownConcept(name.to_string()))
    }

    pub fn name(&self, id: u32) -> &str {
        &self.tokens[id as usize].name
    }

    pub fn role(&self, id: u32) -> Role {
        self.tokens[id as usize].role
    }

    pub fn pad(&self) -> u32 {
        self.tokens.iter().position(|t| t.role == Role::Pad).unwrap() as u32
    }

    pub fn templates(&self) -> Vec<u32> {
        self.with_role(Role::Template)
    }

    pub fn with_role(&self, role: Role) -> Vec<u32> {
        (0..self.tokens.len() as u32).filter(|&i| self.role(i) == role).collect()
    }
}

/// Token ids `[template, subject, style-or-PAD, PAD]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(pub [u32; PROMPT_LEN]);

impl Prompt {
    pub fn new(template: u32, subject: u32, style: u32, pad: u32) -> Self {
        Self([template, subject, style, pad])
    }

    pub fn template(&self) -> u32 {
        self.0[0]
    }

    pub fn subject(&self) -> u32 {
        self.0[1]
    }

    pub fn style(&self) -> u32 {
        self.0[2]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    /// Checks every position against its role.
    pub fn validate(&self, vocab: &Vocab) -> Result<(), ConceptError> {
        let ok = self.0.iter().all(|&t| (t as usize) < vocab.len())
            && vocab.role(self.0[0]) == Role::Template
            && vocab.role(self.0[1]) == Role::Subject
            && matches!(vocab.role(self.0[2]), Role::Style | Role::Pad)
            && vocab.role(self.0[3]) == Role::Pad;
        if ok {
            Ok(())
        } else {
            Err(ConceptError::Invalid(format!("prompt {:?} violates slot roles", self.0)))
        }
    }

    pub fn display<'a>(&'a self, vocab: &'a Vocab) -> impl fmt::Display + 'a {
        PromptDisplay { p: self, vocab }
    }
}

struct PromptDisplay<'a> {
    p: &'a Prompt,
    vocab: &'a Vocab,
}

impl fmt::Display for PromptDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.p.0.iter().map(|&t| self.vocab.name(t)).collect();
        write!(f, "[{}]", names.join(" "))
    }
}
