//! Slash-separated hierarchical sensor topics, e.g. `/rack1/chassis0/node3/power`.

use std::fmt;
use thiserror::Error;

/// Hard limit imposed by the 8-level sensor id layout.
pub const MAX_COMPONENTS: usize = 8;
/// Serialized form (leading slash included) must fit an MQTT topic we cap at 255 bytes.
pub const MAX_SERIALIZED_BYTES: usize = 255;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("malformed topic: {0}")]
    Malformed(String),
}

/// A validated topic path: 1..=8 non-empty components over `[A-Za-z0-9_.-]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Topic {
    components: Vec<String>,
}

pub fn is_valid_component_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-'
}

pub fn is_valid_component(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_valid_component_char)
}

impl Topic {
    /// Parses `/a/b/c`. A single leading slash is required, a trailing slash is not allowed.
    pub fn parse(text: &str) -> Result<Topic, TopicError> {
        let rest = text
            .strip_prefix('/')
            .ok_or_else(|| TopicError::Malformed(format!("missing leading slash in {text:?}")))?;
        if rest.is_empty() {
            return Err(TopicError::Malformed("empty topic".into()));
        }
        if text.len() > MAX_SERIALIZED_BYTES {
            return Err(TopicError::Malformed(format!(
                "topic longer than {MAX_SERIALIZED_BYTES} bytes"
            )));
        }
        let components: Vec<String> = rest.split('/').map(str::to_owned).collect();
        if components.len() > MAX_COMPONENTS {
            return Err(TopicError::Malformed(format!(
                "{} components exceed the maximum of {MAX_COMPONENTS}",
                components.len()
            )));
        }
        for c in &components {
            if c.is_empty() {
                return Err(TopicError::Malformed(format!("empty component in {text:?}")));
            }
            if !is_valid_component(c) {
                return Err(TopicError::Malformed(format!("invalid characters in component {c:?}")));
            }
        }
        Ok(Topic { components })
    }

    pub fn from_components<I, S>(parts: I) -> Result<Topic, TopicError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let components: Vec<String> = parts.into_iter().map(Into::into).collect();
        let serialized: usize = 1 + components.iter().map(|c| c.len() + 1).sum::<usize>() - 1;
        if components.is_empty() || components.len() > MAX_COMPONENTS {
            return Err(TopicError::Malformed(format!(
                "{} components outside 1..={MAX_COMPONENTS}",
                components.len()
            )));
        }
        if serialized > MAX_SERIALIZED_BYTES {
            return Err(TopicError::Malformed(format!(
                "topic longer than {MAX_SERIALIZED_BYTES} bytes"
            )));
        }
        for c in &components {
            if !is_valid_component(c) {
                return Err(TopicError::Malformed(format!("invalid component {c:?}")));
            }
        }
        Ok(Topic { components })
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn depth(&self) -> usize {
        self.components.len()
    }

    /// Appends one component, enforcing the same limits as `parse`.
    pub fn join(&self, component: &str) -> Result<Topic, TopicError> {
        let mut components = self.components.clone();
        components.push(component.to_owned());
        Topic::from_components(components)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.components {
            write!(f, "/{c}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Topic {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::parse(s)
    }
}
