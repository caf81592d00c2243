//! Compiled form of an environment declaration.
//!
//! Semantics: a workspace-relative path travels when it matches at least one
//! `resources` pattern and no `excludes` pattern. `*` stays within one path
//! segment; `**` crosses segments. Matching is done against `/`-separated
//! relative paths, never absolute ones.

use crate::error::TransportError;
use awcp_core::EnvironmentDeclaration;
use globset::{GlobBuilder, GlobSet, GlobSetBuilder};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PatternSet {
    include: GlobSet,
    exclude: GlobSet,
}

fn compile_set(patterns: &[String]) -> Result<GlobSet, TransportError> {
    let mut builder = GlobSetBuilder::new();
    for pattern in patterns {
        let glob = GlobBuilder::new(pattern)
            .literal_separator(true)
            .build()
            .map_err(|source| TransportError::InvalidPattern { pattern: pattern.clone(), source })?;
        builder.add(glob);
    }
    builder.build().map_err(|source| TransportError::InvalidPattern {
        pattern: patterns.join(", "),
        source,
    })
}

impl PatternSet {
    pub fn compile(env: &EnvironmentDeclaration) -> Result<Self, TransportError> {
        Ok(PatternSet {
            include: compile_set(&env.resources)?,
            exclude: compile_set(&env.excludes)?,
        })
    }

    /// Shorthand for "everything travels".
    pub fn everything() -> Self {
        Self::compile(&EnvironmentDeclaration::everything()).expect("`**` compiles")
    }

    pub fn matches(&self, relative_path: &Path) -> bool {
        self.include.is_match(relative_path) && !self.exclude.is_match(relative_path)
    }
}
