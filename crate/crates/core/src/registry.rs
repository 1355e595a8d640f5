//! Name-keyed registries of interchangeable strategies.
//!
//! Every pluggable family in the crate (dataset layouts, codebook
//! initializers, score normalizers, box aggregators, anomaly injectors)
//! implements [`Strategy`] and is looked up by name from a [`Registry`].
//! Each family exposes a `registry()` function returning the built-in set.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub trait Strategy: Send + Sync {
    /// Name used in configuration files and on the command line.
    fn name(&self) -> &'static str;

    fn describe(&self) -> &'static str {
        ""
    }
}

pub struct Registry<T: ?Sized + Strategy> {
    family: &'static str,
    entries: BTreeMap<&'static str, Box<T>>,
}

impl<T: ?Sized + Strategy> Registry<T> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    /// Adds a strategy, replacing any previous entry with the same name.
    pub fn register(&mut self, strategy: Box<T>) -> &mut Self {
        self.entries.insert(strategy.name(), strategy);
        self
    }

    pub fn with(mut self, strategy: Box<T>) -> Self {
        self.register(strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                family: self.family,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn family(&self) -> &'static str {
        self.family
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.values().map(|b| b.as_ref())
    }
}
