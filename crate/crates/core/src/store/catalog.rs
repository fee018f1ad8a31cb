use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{from_ts, ts, Store};
use crate::domain::{
    concepts_have_cycle, Concept, ConceptId, Course, CourseId, DocumentId, Institution, InstitutionId, Role,
    UserAccount, UserId,
};
use crate::{Error, Result};

/// Catalog fixture: institutions, concepts, courses and users.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedFile {
    #[serde(default)]
    pub institutions: Vec<Institution>,
    #[serde(default)]
    pub concepts: Vec<Concept>,
    #[serde(default)]
    pub courses: Vec<Course>,
    #[serde(default)]
    pub users: Vec<UserAccount>,
}

impl SeedFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedCounts {
    pub institutions: usize,
    pub concepts: usize,
    pub courses: usize,
    pub users: usize,
}

/// An uploaded source document; the bytes stay in the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: DocumentId,
    pub filename: String,
    pub content_type: String,
    pub sha256: String,
    pub size: u64,
    pub created_at: DateTime<Utc>,
}

fn course_row(conn: &Connection, id: String, code: String, title: String, default: Option<String>) -> Result<Course> {
    let mut stmt = conn.prepare_cached(
        "SELECT institution_id FROM institution_courses WHERE course_id = ?1 ORDER BY institution_id",
    )?;
    let institution_ids = stmt
        .query_map([&id], |r| r.get::<_, String>(0))?
        .map(|r| r.map(InstitutionId::from))
        .collect::<rusqlite::Result<BTreeSet<_>>>()?;
    Ok(Course {
        id: id.into(),
        code,
        title,
        institution_ids,
        default_concept_id: default.map(ConceptId::from),
    })
}

pub(crate) fn load_course(conn: &Connection, id: &CourseId) -> Result<Course> {
    let row = conn
        .query_row(
            "SELECT id, code, title, default_concept_id FROM courses WHERE id = ?1",
            [id.as_str()],
            |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)),
        )
        .optional()?;
    let (id, code, title, default) = row.ok_or_else(|| Error::UnknownCourse(id.to_string()))?;
    course_row(conn, id, code, title, default)
}

pub(crate) fn load_user(conn: &Connection, id: &UserId) -> Result<UserAccount> {
    let row = conn
        .query_row(
            "SELECT id, role, institution_id, display_name FROM users WHERE id = ?1",
            [id.as_str()],
            |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get(3)?)),
        )
        .optional()?;
    let (id, role, institution_id, display_name) = row.ok_or_else(|| Error::UnknownUser(id.to_string()))?;
    Ok(UserAccount {
        id: id.into(),
        role: role.parse::<Role>().map_err(|_| Error::IntegrityViolation(format!("user has unknown role {role}")))?,
        institution_id: institution_id.into(),
        display_name,
    })
}

fn concept_key(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Maps concept names onto ids, matching case-insensitively and creating
/// concepts that do not exist yet. With no names, the course's default
/// concept is used.
pub(crate) fn resolve_concepts(tx: &Transaction<'_>, course: &Course, names: &[String]) -> Result<BTreeSet<ConceptId>> {
    let mut ids = BTreeSet::new();
    for name in names.iter().filter(|n| !n.trim().is_empty()) {
        let existing: Option<String> = tx
            .query_row(
                "SELECT id FROM concepts WHERE lower(trim(name)) = ?1 ORDER BY id LIMIT 1",
                [concept_key(name)],
                |r| r.get(0),
            )
            .optional()?;
        let id = match existing {
            Some(id) => ConceptId::from(id),
            None => {
                let id = ConceptId::new();
                tx.execute(
                    "INSERT INTO concepts (id, name, parent_id) VALUES (?1, ?2, NULL)",
                    params![id.as_str(), name.trim()],
                )?;
                id
            }
        };
        ids.insert(id);
    }
    if ids.is_empty() {
        if let Some(default) = &course.default_concept_id {
            ids.insert(default.clone());
        }
    }
    Ok(ids)
}

impl Store {
    /// Upserts every record in the seed file in one transaction.
    pub fn seed(&self, seed: &SeedFile) -> Result<SeedCounts> {
        if concepts_have_cycle(&seed.concepts) {
            return Err(Error::InvalidRequest("concept parents form a cycle".into()));
        }
        self.write(|tx| {
            for i in &seed.institutions {
                tx.execute(
                    "INSERT INTO institutions (id, name, country_code) VALUES (?1, ?2, ?3)
                     ON CONFLICT (id) DO UPDATE SET name = excluded.name, country_code = excluded.country_code",
                    params![i.id.as_str(), i.name, i.country_code],
                )?;
            }
            // Parents may be listed after their children.
            for c in &seed.concepts {
                tx.execute(
                    "INSERT INTO concepts (id, name, parent_id) VALUES (?1, ?2, NULL)
                     ON CONFLICT (id) DO UPDATE SET name = excluded.name",
                    params![c.id.as_str(), c.name],
                )?;
            }
            for c in &seed.concepts {
                tx.execute(
                    "UPDATE concepts SET parent_id = ?2 WHERE id = ?1",
                    params![c.id.as_str(), c.parent_id.as_ref().map(|p| p.as_str())],
                )?;
            }
            for c in &seed.courses {
                tx.execute(
                    "INSERT INTO courses (id, code, title, default_concept_id) VALUES (?1, ?2, ?3, ?4)
                     ON CONFLICT (id) DO UPDATE SET code = excluded.code, title = excluded.title,
                         default_concept_id = excluded.default_concept_id",
                    params![c.id.as_str(), c.code, c.title, c.default_concept_id.as_ref().map(|d| d.as_str())],
                )?;
                tx.execute("DELETE FROM institution_courses WHERE course_id = ?1", [c.id.as_str()])?;
                for inst in &c.institution_ids {
                    tx.execute(
                        "INSERT INTO institution_courses (institution_id, course_id) VALUES (?1, ?2)",
                        params![inst.as_str(), c.id.as_str()],
                    )?;
                }
            }
            for u in &seed.users {
                tx.execute(
                    "INSERT INTO users (id, role, institution_id, display_name) VALUES (?1, ?2, ?3, ?4)
                     ON CONFLICT (id) DO UPDATE SET role = excluded.role, institution_id = excluded.institution_id,
                         display_name = excluded.display_name",
                    params![u.id.as_str(), u.role.as_str(), u.institution_id.as_str(), u.display_name],
                )?;
            }
            Ok(SeedCounts {
                institutions: seed.institutions.len(),
                concepts: seed.concepts.len(),
                courses: seed.courses.len(),
                users: seed.users.len(),
            })
        })
    }

    pub fn course(&self, id: &CourseId) -> Result<Course> {
        self.read(|c| load_course(c, id))
    }

    pub fn course_by_code(&self, code: &str) -> Result<Course> {
        self.read(|c| {
            let id: Option<String> = c
                .query_row("SELECT id FROM courses WHERE code = ?1 ORDER BY id LIMIT 1", [code], |r| r.get(0))
                .optional()?;
            let id = id.ok_or_else(|| Error::UnknownCourse(code.to_string()))?;
            load_course(c, &id.into())
        })
    }

    /// Courses offered at `institution`, or every course; ordered by code.
    pub fn list_courses(&self, institution: Option<&InstitutionId>) -> Result<Vec<Course>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT id, code, title, default_concept_id FROM courses
                 WHERE ?1 IS NULL OR id IN (SELECT course_id FROM institution_courses WHERE institution_id = ?1)
                 ORDER BY code, id",
            )?;
            let rows = stmt
                .query_map([institution.map(|i| i.as_str())], |r| {
                    Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?))
                })?
                .collect::<rusqlite::Result<Vec<(String, String, String, Option<String>)>>>()?;
            rows.into_iter().map(|(id, code, title, d)| course_row(c, id, code, title, d)).collect()
        })
    }

    pub fn concepts(&self) -> Result<Vec<Concept>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT id, name, parent_id FROM concepts ORDER BY id")?;
            let rows = stmt.query_map([], |r| {
                Ok(Concept {
                    id: r.get::<_, String>(0)?.into(),
                    name: r.get(1)?,
                    parent_id: r.get::<_, Option<String>>(2)?.map(ConceptId::from),
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    pub fn user(&self, id: &UserId) -> Result<UserAccount> {
        self.read(|c| load_user(c, id))
    }

    pub fn put_document(&self, filename: &str, content_type: &str, bytes: &[u8]) -> Result<DocumentRecord> {
        let record = DocumentRecord {
            id: DocumentId::new(),
            filename: filename.to_string(),
            content_type: content_type.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            size: bytes.len() as u64,
            created_at: self.now(),
        };
        self.write(|tx| {
            tx.execute(
                "INSERT INTO documents (id, filename, content_type, sha256, size, bytes, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
                params![
                    record.id.as_str(),
                    record.filename,
                    record.content_type,
                    record.sha256,
                    record.size as i64,
                    bytes,
                    ts(record.created_at)
                ],
            )?;
            Ok(())
        })?;
        Ok(record)
    }

    pub fn document(&self, id: &DocumentId) -> Result<(DocumentRecord, Vec<u8>)> {
        self.read(|c| {
            c.query_row(
                "SELECT id, filename, content_type, sha256, size, created_at, bytes FROM documents WHERE id = ?1",
                [id.as_str()],
                |r| {
                    Ok((
                        DocumentRecord {
                            id: r.get::<_, String>(0)?.into(),
                            filename: r.get(1)?,
                            content_type: r.get(2)?,
                            sha256: r.get(3)?,
                            size: r.get::<_, i64>(4)? as u64,
                            created_at: from_ts(r.get(5)?),
                        },
                        r.get(6)?,
                    ))
                },
            )
            .optional()?
            .ok_or_else(|| Error::UnknownDocument(id.to_string()))
        })
    }
}
