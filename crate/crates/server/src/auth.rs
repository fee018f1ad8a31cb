//! Static bearer-token table.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use serde::Deserialize;

use juvenotes_core::domain::{Role, UserId};
use juvenotes_core::{Error, Result};

use crate::error::ApiError;
use crate::AppState;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Principal {
    pub user_id: UserId,
    pub role: Role,
}

#[derive(Debug, Clone, Default)]
pub struct TokenTable {
    tokens: HashMap<String, Principal>,
}

impl TokenTable {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let tokens: HashMap<String, Principal> =
            serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("token table: {e}")))?;
        if tokens.keys().any(|t| t.trim().is_empty()) {
            return Err(Error::Config("token table contains an empty token".into()));
        }
        Ok(Self { tokens })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn lookup(&self, token: &str) -> Option<&Principal> {
        self.tokens.get(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Bearer token from the Authorization header, or from a `token` query
/// parameter (browsers cannot set headers on a websocket handshake).
fn presented_token(parts: &Parts) -> Option<String> {
    if let Some(value) = parts.headers.get(AUTHORIZATION) {
        let value = value.to_str().ok()?;
        let (scheme, token) = value.split_once(' ')?;
        return scheme.eq_ignore_ascii_case("bearer").then(|| token.trim().to_string());
    }
    let query = parts.uri.query()?;
    query.split('&').find_map(|pair| pair.strip_prefix("token=").map(str::to_string))
}

impl FromRequestParts<Arc<AppState>> for Principal {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, Self::Rejection> {
        let token = presented_token(parts).ok_or_else(|| ApiError::unauthenticated("missing bearer token"))?;
        state.tokens.lookup(&token).cloned().ok_or_else(|| ApiError::unauthenticated("unknown bearer token"))
    }
}

impl Principal {
    pub fn require_reviewer(&self) -> Result<(), ApiError> {
        if self.role.can_review() {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!("{} may not use this route", self.role)))
        }
    }
}
