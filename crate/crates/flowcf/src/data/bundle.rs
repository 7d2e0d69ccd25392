//! On-disk dataset bundle: the three split matrices, token index maps, item
//! frequencies, sub-threshold noise candidates, and provenance. Every file is
//! plain text with deterministic bytes, so re-running preparation on the same
//! inputs reproduces the bundle exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, FrequencyVector, InteractionMatrix, TokenIndex};
use crate::error::{Error, Result};
use crate::util::atomic_write;

pub const TRAIN_FILE: &str = "train.mat";
pub const VALIDATION_FILE: &str = "validation.mat";
pub const TEST_FILE: &str = "test.mat";
pub const USERS_FILE: &str = "users.idx";
pub const ITEMS_FILE: &str = "items.idx";
pub const FREQUENCIES_FILE: &str = "frequencies.txt";
pub const DISCARDED_FILE: &str = "discarded.txt";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub input_sha256: String,
    pub config_sha256: String,
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub nnz_train: usize,
    pub nnz_validation: usize,
    pub nnz_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub split: DatasetSplit,
    pub frequencies: FrequencyVector,
    /// Sub-threshold (user, item) index pairs usable as natural noise.
    pub discarded: Vec<(u32, u32)>,
    pub provenance: Provenance,
}

fn format_matrix(m: &InteractionMatrix) -> String {
    let mut out = String::new();
    writeln!(out, "{} {} {}", m.n_users, m.n_items, m.nnz()).unwrap();
    for row in m.rows() {
        let mut first = true;
        for &i in row {
            if !first {
                out.push(' ');
            }
            write!(out, "{i}").unwrap();
            first = false;
        }
        out.push('\n');
    }
    out
}

fn format_index(index: &TokenIndex) -> String {
    let mut out = String::new();
    for (i, token) in index.tokens().iter().enumerate() {
        writeln!(out, "{i}\t{token}").unwrap();
    }
    out
}

/// Writes every bundle file under `dir`, creating it if needed.
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    let split = &bundle.split;
    atomic_write(&dir.join(TRAIN_FILE), format_matrix(&split.train).as_bytes())?;
    atomic_write(
        &dir.join(VALIDATION_FILE),
        format_matrix(&split.validation).as_bytes(),
    )?;
    atomic_write(&dir.join(TEST_FILE), format_matrix(&split.test).as_bytes())?;
    atomic_write(
        &dir.join(USERS_FILE),
        format_index(&split.train.user_index).as_bytes(),
    )?;
    atomic_write(
        &dir.join(ITEMS_FILE),
        format_index(&split.train.item_index).as_bytes(),
    )?;

    let mut freq = String::new();
    for v in bundle.frequencies.as_slice() {
        writeln!(freq, "{v}").unwrap();
    }
    atomic_write(&dir.join(FREQUENCIES_FILE), freq.as_bytes())?;

    let mut disc = String::new();
    for (u, i) in &bundle.discarded {
        writeln!(disc, "{u} {i}").unwrap();
    }
    atomic_write(&dir.join(DISCARDED_FILE), disc.as_bytes())?;

    let mut json = serde_json::to_vec_pretty(&bundle.provenance)
        .map_err(|e| Error::Data(format!("provenance serialization: {e}")))?;
    json.push(b'\n');
    atomic_write(&dir.join(PROVENANCE_FILE), &json)?;
    Ok(())
}

fn read_text(dir: &Path, name: &str) -> Result<String> {
    fs::read_to_string(dir.join(name))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join(name).display())))
}

fn parse_index(text: &str, name: &str) -> Result<TokenIndex> {
    let mut tokens = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let (num, token) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("{name}: expected index<TAB>token"),
        })?;
        let parsed: usize = num.parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("{name}: bad index {num:?}"),
        })?;
        if parsed != idx {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("{name}: index {parsed} out of order"),
            });
        }
        tokens.push(token.to_string());
    }
    TokenIndex::new(tokens)
}

fn parse_matrix(
    text: &str,
    name: &str,
    user_index: Arc<TokenIndex>,
    item_index: Arc<TokenIndex>,
) -> Result<InteractionMatrix> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: format!("{name}: missing header"),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            line: 1,
            msg: format!("{name}: bad header {header:?}"),
        })?;
    if dims.len() != 3 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{name}: header needs n_users n_items nnz"),
        });
    }
    let (n_users, n_items, nnz) = (dims[0], dims[1], dims[2]);
    if n_users != user_index.len() || n_items != item_index.len() {
        return Err(Error::Data(format!(
            "{name}: header {n_users}x{n_items} disagrees with index maps {}x{}",
            user_index.len(),
            item_index.len()
        )));
    }
    let mut rows = Vec::with_capacity(n_users);
    for (offset, line) in lines.enumerate() {
        if rows.len() == n_users {
            return Err(Error::Parse {
                line: offset + 2,
                msg: format!("{name}: more rows than {n_users} users"),
            });
        }
        let row: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: offset + 2,
                msg: format!("{name}: bad item index"),
            })?;
        rows.push(row);
    }
    if rows.len() != n_users {
        return Err(Error::Data(format!(
            "{name}: {} rows for {n_users} users",
            rows.len()
        )));
    }
    let m = InteractionMatrix::from_rows(rows, user_index, item_index)?;
    if m.nnz() != nnz {
        return Err(Error::Data(format!(
            "{name}: header claims {nnz} interactions, rows hold {}",
            m.nnz()
        )));
    }
    Ok(m)
}

/// Reads a bundle back, revalidating every structural invariant.
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let user_index = Arc::new(parse_index(&read_text(dir, USERS_FILE)?, USERS_FILE)?);
    let item_index = Arc::new(parse_index(&read_text(dir, ITEMS_FILE)?, ITEMS_FILE)?);

    let train = parse_matrix(
        &read_text(dir, TRAIN_FILE)?,
        TRAIN_FILE,
        user_index.clone(),
        item_index.clone(),
    )?;
    let validation = parse_matrix(
        &read_text(dir, VALIDATION_FILE)?,
        VALIDATION_FILE,
        user_index.clone(),
        item_index.clone(),
    )?;
    let test = parse_matrix(
        &read_text(dir, TEST_FILE)?,
        TEST_FILE,
        user_index.clone(),
        item_index.clone(),
    )?;

    let freq_text = read_text(dir, FREQUENCIES_FILE)?;
    let mut values = Vec::new();
    for (idx, line) in freq_text.lines().enumerate() {
        let v: f64 = line.trim().parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("{FREQUENCIES_FILE}: bad frequency {line:?}"),
        })?;
        values.push(v);
    }
    if values.len() != item_index.len() {
        return Err(Error::Data(format!(
            "{FREQUENCIES_FILE}: {} entries for {} items",
            values.len(),
            item_index.len()
        )));
    }
    let frequencies = FrequencyVector::new(values)?;

    let disc_text = read_text(dir, DISCARDED_FILE)?;
    let mut discarded = Vec::new();
    for (idx, line) in disc_text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<u32> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("{DISCARDED_FILE}: expected two indices"),
            })
        };
        let u = parse(parts.next())?;
        let i = parse(parts.next())?;
        discarded.push((u, i));
    }

    let prov_text = read_text(dir, PROVENANCE_FILE)?;
    let provenance: Provenance = serde_json::from_str(&prov_text)
        .map_err(|e| Error::Data(format!("{PROVENANCE_FILE}: {e}")))?;

    Ok(Bundle {
        split: DatasetSplit {
            train,
            validation,
            test,
            seed: provenance.seed,
        },
        frequencies,
        discarded,
        provenance,
    })
}
