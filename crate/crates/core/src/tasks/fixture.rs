//! Synthetic `toy_finance` SQLite fixture.
//!
//! Generation consumes one [`XorShift64Star`] stream in a fixed order:
//! 50 accounts (first name, last name, region, opening day), then each
//! transaction (account, day offset, amount in cents, category, merchant).
//! The same seed therefore always yields the same rows, and the canonical
//! dump (rows of `accounts`, `transactions`, `balances` in primary-key
//! order, tab-separated, newline-joined) hashes to the same digest.

use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rusqlite::types::ValueRef;
use rusqlite::{params, Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::digest::sha256_hex;
use crate::rng::XorShift64Star;

pub const SCHEMA_VERSION: &str = "toy_finance/1";
pub const DEFAULT_ROWS: usize = 1000;
pub const ACCOUNT_COUNT: i64 = 50;
pub const REGIONS: [&str; 3] = ["NA", "EU", "APAC"];
/// Inclusive bounds for transaction dates.
pub const FIRST_DATE: (i32, u32, u32) = (2025, 1, 1);
pub const LAST_DATE: (i32, u32, u32) = (2025, 9, 1);
/// Amount bounds in cents, inclusive.
pub const MIN_AMOUNT_CENTS: i64 = -1_000_000;
pub const MAX_AMOUNT_CENTS: i64 = 1_000_000;

const FIRST_NAMES: [&str; 16] = [
    "Avery", "Blake", "Casey", "Dana", "Elliot", "Farah", "Gavin", "Hana", "Imani", "Jonah", "Kiran", "Lena",
    "Mateo", "Nadia", "Owen", "Priya",
];
const LAST_NAMES: [&str; 16] = [
    "Adler", "Brooks", "Chen", "Duarte", "Eriksen", "Fischer", "Garcia", "Haddad", "Ito", "Jensen", "Kowalski",
    "Larsen", "Mensah", "Novak", "Okafor", "Patel",
];
const CATEGORIES: [&str; 10] = [
    "Payroll",
    "Rent",
    "Utilities",
    "Travel",
    "Software",
    "Consulting",
    "Equipment",
    "Marketing",
    "Insurance",
    "Refund",
];
const MERCHANTS: [&str; 12] = [
    "Northwind", "Contoso", "Globex", "Initech", "Umbrella", "Stark", "Wayne", "Acme", "Hooli", "Vandelay",
    "Soylent", "Tyrell",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureDB {
    pub path: PathBuf,
    pub schema_version: String,
    pub seed: u64,
    pub n_rows: usize,
    pub content_hash: String,
}

impl FixtureDB {
    /// Sidecar JSON recording how the fixture was generated.
    pub fn meta_path(db_path: &Path) -> PathBuf {
        let mut name = db_path.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        db_path.with_file_name(name)
    }

    pub fn save_meta(&self) -> Result<(), TaskError> {
        let path = Self::meta_path(&self.path);
        let json = serde_json::to_string_pretty(self).expect("fixture meta serializes");
        std::fs::write(&path, json + "\n").map_err(|e| TaskError::io(&path, e))
    }

    pub fn load(db_path: &Path) -> Result<Self, TaskError> {
        let path = Self::meta_path(db_path);
        let raw = std::fs::read_to_string(&path).map_err(|e| TaskError::io(&path, e))?;
        let mut meta: FixtureDB = serde_json::from_str(&raw)?;
        meta.path = db_path.to_path_buf();
        Ok(meta)
    }

    /// Recomputes the dump hash of the file on disk.
    pub fn current_hash(&self) -> Result<String, TaskError> {
        fixture_content_hash(&self.path)
    }

    pub fn verify(&self) -> Result<(), TaskError> {
        let actual = self.current_hash()?;
        if actual != self.content_hash {
            return Err(TaskError::FixtureTampered {
                expected: self.content_hash.clone(),
                actual,
            });
        }
        Ok(())
    }
}

pub fn open_read_only(path: &Path) -> Result<Connection, TaskError> {
    if !path.exists() {
        return Err(TaskError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "fixture database not found"),
        ));
    }
    Ok(Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?)
}

fn date(d: (i32, u32, u32)) -> NaiveDate {
    NaiveDate::from_ymd_opt(d.0, d.1, d.2).expect("valid constant date")
}

struct Account {
    name: String,
    region: &'static str,
    opened_on: NaiveDate,
}

struct Transaction {
    account_id: i64,
    date: NaiveDate,
    amount_cents: i64,
    category: &'static str,
    description: String,
}

fn draw_rows(seed: u64, n_rows: usize) -> (Vec<Account>, Vec<Transaction>) {
    let mut rng = XorShift64Star::new(seed);
    let opened_base = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
    let accounts: Vec<Account> = (0..ACCOUNT_COUNT)
        .map(|_| {
            let first = rng.choose(&FIRST_NAMES);
            let last = rng.choose(&LAST_NAMES);
            let region = *rng.choose(&REGIONS);
            let opened_on = opened_base + Duration::days(rng.below(3650) as i64);
            Account {
                name: format!("{first} {last}"),
                region,
                opened_on,
            }
        })
        .collect();

    let first = date(FIRST_DATE);
    let span_days = (date(LAST_DATE) - first).num_days() as u64 + 1;
    let transactions = (0..n_rows)
        .map(|_| {
            let account_id = rng.range_inclusive(1, ACCOUNT_COUNT);
            let day = rng.below(span_days) as i64;
            let amount_cents = rng.range_inclusive(MIN_AMOUNT_CENTS, MAX_AMOUNT_CENTS);
            let category = *rng.choose(&CATEGORIES);
            let merchant = rng.choose(&MERCHANTS);
            Transaction {
                account_id,
                date: first + Duration::days(day),
                amount_cents,
                category,
                description: format!("{merchant} {}", category.to_lowercase()),
            }
        })
        .collect();
    (accounts, transactions)
}

fn cents_to_real(cents: i64) -> f64 {
    cents as f64 / 100.0
}

const SCHEMA: &str = "
CREATE TABLE accounts (
    id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    region TEXT NOT NULL,
    opened_on TEXT NOT NULL
);
CREATE TABLE transactions (
    id INTEGER PRIMARY KEY,
    account_id INTEGER NOT NULL REFERENCES accounts(id),
    date TEXT NOT NULL,
    amount REAL NOT NULL,
    region TEXT NOT NULL,
    category TEXT NOT NULL,
    description TEXT NOT NULL
);
CREATE TABLE balances (
    account_id INTEGER PRIMARY KEY REFERENCES accounts(id),
    balance REAL NOT NULL
);
";

/// Writes a fresh fixture at `path`, replacing any existing file.
pub fn generate_fixture_db(path: &Path, seed: u64, n_rows: usize) -> Result<FixtureDB, TaskError> {
    if n_rows == 0 {
        return Err(TaskError::InvalidRowCount);
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| TaskError::io(parent, e))?;
    }
    let tmp = path.with_extension("sqlite.tmp");
    if tmp.exists() {
        std::fs::remove_file(&tmp).map_err(|e| TaskError::io(&tmp, e))?;
    }

    let (accounts, transactions) = draw_rows(seed, n_rows);
    {
        let mut conn = Connection::open(&tmp).map_err(|e| match e {
            rusqlite::Error::SqliteFailure(..) => TaskError::io(
                &tmp,
                std::io::Error::new(std::io::ErrorKind::PermissionDenied, e.to_string()),
            ),
            other => TaskError::Sqlite(other),
        })?;
        conn.execute_batch(SCHEMA)?;
        let tx = conn.transaction()?;
        {
            let mut ins = tx.prepare("INSERT INTO accounts (id, name, region, opened_on) VALUES (?1, ?2, ?3, ?4)")?;
            for (i, a) in accounts.iter().enumerate() {
                ins.execute(params![i as i64 + 1, a.name, a.region, a.opened_on.to_string()])?;
            }
            let mut ins = tx.prepare(
                "INSERT INTO transactions (id, account_id, date, amount, region, category, description)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            )?;
            let mut balances = vec![0i64; ACCOUNT_COUNT as usize];
            for (i, t) in transactions.iter().enumerate() {
                let region = accounts[(t.account_id - 1) as usize].region;
                ins.execute(params![
                    i as i64 + 1,
                    t.account_id,
                    t.date.to_string(),
                    cents_to_real(t.amount_cents),
                    region,
                    t.category,
                    t.description
                ])?;
                balances[(t.account_id - 1) as usize] += t.amount_cents;
            }
            let mut ins = tx.prepare("INSERT INTO balances (account_id, balance) VALUES (?1, ?2)")?;
            for (i, cents) in balances.iter().enumerate() {
                ins.execute(params![i as i64 + 1, cents_to_real(*cents)])?;
            }
        }
        tx.commit()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| TaskError::io(path, e))?;

    let fixture = FixtureDB {
        path: path.to_path_buf(),
        schema_version: SCHEMA_VERSION.to_string(),
        seed,
        n_rows,
        content_hash: fixture_content_hash(path)?,
    };
    fixture.save_meta()?;
    Ok(fixture)
}

fn render_value(v: ValueRef<'_>) -> String {
    match v {
        ValueRef::Null => "NULL".to_string(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(r) => r.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => hex::encode(b),
    }
}

/// Canonical text dump: every row of each table in primary-key order,
/// columns joined by tabs, rows joined by newlines.
pub fn canonical_dump(conn: &Connection) -> Result<String, TaskError> {
    let queries = [
        "SELECT * FROM accounts ORDER BY id",
        "SELECT * FROM transactions ORDER BY id",
        "SELECT * FROM balances ORDER BY account_id",
    ];
    let mut lines = Vec::new();
    for q in queries {
        let mut stmt = conn.prepare(q)?;
        let cols = stmt.column_count();
        let mut rows = stmt.query([])?;
        while let Some(row) = rows.next()? {
            let fields: Vec<String> = (0..cols)
                .map(|i| row.get_ref(i).map(render_value))
                .collect::<Result<_, _>>()?;
            lines.push(fields.join("\t"));
        }
    }
    Ok(lines.join("\n"))
}

pub fn fixture_content_hash(path: &Path) -> Result<String, TaskError> {
    let conn = open_read_only(path)?;
    Ok(sha256_hex(canonical_dump(&conn)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_respect_bounds() {
        let (accounts, txs) = draw_rows(42, 1000);
        assert_eq!(accounts.len(), 50);
        assert_eq!(txs.len(), 1000);
        for t in &txs {
            assert!(t.date >= date(FIRST_DATE) && t.date <= date(LAST_DATE));
            assert!((MIN_AMOUNT_CENTS..=MAX_AMOUNT_CENTS).contains(&t.amount_cents));
            assert!((1..=ACCOUNT_COUNT).contains(&t.account_id));
        }
        assert!(txs.iter().any(|t| t.amount_cents < 0));
    }

    #[test]
    fn generates_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy_finance.sqlite");
        let a = generate_fixture_db(&path, 42, 1000).unwrap();
        let b = generate_fixture_db(&path, 42, 1000).unwrap();
        assert_eq!(a.content_hash, b.content_hash);
        a.verify().unwrap();

        let meta = FixtureDB::load(&path).unwrap();
        assert_eq!(meta, a);

        let conn = open_read_only(&path).unwrap();
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM transactions", [], |r| r.get(0)).unwrap();
        assert_eq!(n, 1000);
        // balances equal per-account sums (to the cent)
        let mismatches: i64 = conn
            .query_row(
                "SELECT COUNT(*) FROM balances b WHERE abs(b.balance - (SELECT COALESCE(SUM(amount), 0)
                 FROM transactions t WHERE t.account_id = b.account_id)) > 0.005",
                [],
                |r| r.get(0),
            )
            .unwrap();
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn zero_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_fixture_db(&dir.path().join("x.sqlite"), 1, 0),
            Err(TaskError::InvalidRowCount)
        ));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = generate_fixture_db(&blocker.join("sub").join("db.sqlite"), 1, 10).unwrap_err();
        assert!(matches!(err, TaskError::Io { .. }), "{err:?}");
    }

    #[test]
    fn tamper_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        let f = generate_fixture_db(&path, 7, 20).unwrap();
        Connection::open(&path)
            .unwrap()
            .execute("UPDATE transactions SET amount = amount + 0.01 WHERE id = 3", [])
            .unwrap();
        assert!(matches!(f.verify(), Err(TaskError::FixtureTampered { .. })));
    }
}
