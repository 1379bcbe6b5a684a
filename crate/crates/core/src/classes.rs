use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClassError {
    #[error("invalid class name {0:?}: use lowercase letters, digits, '_' or '-'")]
    BadName(String),
    #[error("class {0:?} is not registered")]
    Unregistered(String),
}

/// Name of a defect type, e.g. `crack`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DefectClass(String);

impl DefectClass {
    pub fn new(name: impl Into<String>) -> Result<Self, ClassError> {
        let name = name.into();
        let ok = !name.is_empty()
            && name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-');
        if ok {
            Ok(Self(name))
        } else {
            Err(ClassError::BadName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for DefectClass {
    type Error = ClassError;
    fn try_from(s: String) -> Result<Self, ClassError> {
        Self::new(s)
    }
}

impl From<DefectClass> for String {
    fn from(c: DefectClass) -> String {
        c.0
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Set of known defect classes, in registration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassRegistry {
    classes: Vec<DefectClass>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        Self::from_names(["crack", "spalling", "rust"]).expect("valid built-in names")
    }
}

impl ClassRegistry {
    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Result<Self, ClassError> {
        let mut r = Self { classes: Vec::new() };
        for n in names {
            r.register(DefectClass::new(n)?);
        }
        Ok(r)
    }

    /// Adds a class; registering an existing name is a no-op.
    pub fn register(&mut self, class: DefectClass) {
        if !self.classes.contains(&class) {
            self.classes.push(class);
        }
    }

    pub fn contains(&self, class: &DefectClass) -> bool {
        self.classes.contains(class)
    }

    pub fn get(&self, name: &str) -> Result<&DefectClass, ClassError> {
        self.classes.iter().find(|c| c.as_str() == name).ok_or_else(|| ClassError::Unregistered(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &DefectClass> {
        self.classes.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_validated() {
        assert!(DefectClass::new("crack").is_ok());
        assert!(DefectClass::new("Crack").is_err());
        assert!(DefectClass::new("").is_err());
        let err: Result<DefectClass, _> = serde_json::from_str("\"a b\"");
        assert!(err.is_err());
    }

    #[test]
    fn default_registry_and_extension() {
        let mut r = ClassRegistry::default();
        let names: Vec<&str> = r.iter().map(DefectClass::as_str).collect();
        assert_eq!(names, ["crack", "spalling", "rust"]);
        assert!(matches!(r.get("efflorescence"), Err(ClassError::Unregistered(_))));
        r.register(DefectClass::new("efflorescence").unwrap());
        r.register(DefectClass::new("crack").unwrap());
        assert_eq!(r.iter().count(), 4);
        assert!(r.get("efflorescence").is_ok());
    }
}
