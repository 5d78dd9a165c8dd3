//! Append-only, hash-chained round log.
//!
//! Entry `k` stores `digest = SHA-256(k as u64 LE || prev_digest || payload)`
//! where `prev_digest` is entry `k-1`'s digest (32 zero bytes for entry 0) and
//! the payload is the compact JSON encoding of a [`RoundRecord`].
//!
//! On disk the log is the 8-byte magic `FLKLEDG1` followed by each entry as
//! `index (u64 LE) | prev_digest (32) | payload length (u64 LE) | payload | digest (32)`.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::economics::{settle, EconParams, RewardStatement};
use crate::error::{Error, Result};
use crate::protocol::RoundRecord;

pub const MAGIC: &[u8; 8] = b"FLKLEDG1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub index: u64,
    pub prev_digest: [u8; 32],
    pub payload: Vec<u8>,
    pub digest: [u8; 32],
}

pub fn entry_digest(index: u64, prev_digest: &[u8; 32], payload: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(index.to_le_bytes());
    h.update(prev_digest);
    h.update(payload);
    h.finalize().into()
}

/// Result of [`Ledger::verify_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Ok,
    /// Position of the first entry whose index, link, or digest is wrong.
    BrokenAt(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        Ledger { entries }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<LedgerEntry> {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head_digest(&self) -> [u8; 32] {
        self.entries.last().map_or([0; 32], |e| e.digest)
    }

    /// Serializes `record` canonically and chains it onto the log.
    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<&LedgerEntry> {
        let payload = serde_json::to_vec(record)?;
        Ok(self.append_payload(payload))
    }

    pub fn append_payload(&mut self, payload: Vec<u8>) -> &LedgerEntry {
        let index = self.entries.len() as u64;
        let prev_digest = self.head_digest();
        let digest = entry_digest(index, &prev_digest, &payload);
        self.entries.push(LedgerEntry {
            index,
            prev_digest,
            payload,
            digest,
        });
        self.entries.last().expect("just pushed")
    }

    pub fn verify_chain(&self) -> ChainStatus {
        let mut prev = [0u8; 32];
        for (pos, e) in self.entries.iter().enumerate() {
            if e.index != pos as u64
                || e.prev_digest != prev
                || entry_digest(e.index, &e.prev_digest, &e.payload) != e.digest
            {
                return ChainStatus::BrokenAt(pos);
            }
            prev = e.digest;
        }
        ChainStatus::Ok
    }

    pub fn records(&self) -> Result<Vec<RoundRecord>> {
        self.entries
            .iter()
            .map(|e| {
                serde_json::from_slice(&e.payload)
                    .map_err(|err| Error::Ledger(format!("entry {}: {err}", e.index)))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for e in &self.entries {
            out.extend_from_slice(&e.index.to_le_bytes());
            out.extend_from_slice(&e.prev_digest);
            out.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.payload);
            out.extend_from_slice(&e.digest);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::Ledger("missing ledger magic".into()))?;
        let mut cursor = Cursor { buf: rest, pos: 0 };
        let mut entries = Vec::new();
        while !cursor.done() {
            let index = cursor.u64()?;
            let prev_digest = cursor.digest()?;
            let len = cursor.u64()?;
            let len = usize::try_from(len)
                .map_err(|_| Error::Ledger(format!("payload length {len} too large")))?;
            let payload = cursor.take(len)?.to_vec();
            let digest = cursor.digest()?;
            entries.push(LedgerEntry {
                index,
                prev_digest,
                payload,
                digest,
            });
        }
        Ok(Ledger { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ledger::from_bytes(&std::fs::read(path)?)
    }

    /// One JSON object per line: `index`, hex digests, and the decoded record.
    pub fn export_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            let record: serde_json::Value = serde_json::from_slice(&e.payload)
                .map_err(|err| Error::Ledger(format!("entry {}: {err}", e.index)))?;
            let line = serde_json::json!({
                "index": e.index,
                "prev_digest": hex::encode(e.prev_digest),
                "digest": hex::encode(e.digest),
                "record": record,
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Ledger(format!("truncated entry at byte {}", self.pos + MAGIC.len())))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn digest(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub round: u64,
    pub field: String,
    pub stored: f64,
    pub recomputed: f64,
}

/// Outcome of re-settling every round in a log.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub rounds: usize,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

const REPLAY_TOLERANCE: f64 = 1e-9;

fn compare(out: &mut Vec<Mismatch>, round: u64, field: &str, stored: &[f64], fresh: &[f64]) {
    if stored.len() != fresh.len() {
        out.push(Mismatch {
            round,
            field: format!("{field}.len"),
            stored: stored.len() as f64,
            recomputed: fresh.len() as f64,
        });
        return;
    }
    for (k, (&a, &b)) in stored.iter().zip(fresh).enumerate() {
        let scale = 1f64.max(a.abs()).max(b.abs());
        if !((a - b).abs() <= REPLAY_TOLERANCE * scale) {
            out.push(Mismatch {
                round,
                field: format!("{field}[{k}]"),
                stored: a,
                recomputed: b,
            });
        }
    }
}

fn compare_statements(out: &mut Vec<Mismatch>, round: u64, s: &RewardStatement, f: &RewardStatement) {
    compare(out, round, "pool_train", &[s.pool_train], &[f.pool_train]);
    compare(out, round, "pool_val", &[s.pool_val], &[f.pool_val]);
    let ranks = |r: &[usize]| r.iter().map(|&x| x as f64).collect::<Vec<_>>();
    compare(out, round, "trainer_ranks", &ranks(&s.trainer_ranks), &ranks(&f.trainer_ranks));
    compare(out, round, "trainer_shares", &s.trainer_shares, &f.trainer_shares);
    compare(
        out,
        round,
        "trainer_operator_rewards",
        &s.trainer_operator_rewards,
        &f.trainer_operator_rewards,
    );
    compare(
        out,
        round,
        "trainer_delegator_rewards",
        &s.trainer_delegator_rewards,
        &f.trainer_delegator_rewards,
    );
    compare(out, round, "validator_shares", &s.validator_shares, &f.validator_shares);
    compare(
        out,
        round,
        "validator_operator_rewards",
        &s.validator_operator_rewards,
        &f.validator_operator_rewards,
    );
    compare(
        out,
        round,
        "validator_delegator_rewards",
        &s.validator_delegator_rewards,
        &f.validator_delegator_rewards,
    );
    compare(out, round, "consensus", &s.consensus, &f.consensus);
}

/// Re-settles every stored round from its stored scores and stakes and
/// compares the result with the stored statement.
pub fn replay_settlements(ledger: &Ledger, econ: &EconParams) -> Result<ReplayReport> {
    replay(ledger, Some(econ))
}

/// Like [`replay_settlements`], but settles each round with the economic
/// parameters stored in its own record.
pub fn replay_recorded(ledger: &Ledger) -> Result<ReplayReport> {
    replay(ledger, None)
}

fn replay(ledger: &Ledger, econ: Option<&EconParams>) -> Result<ReplayReport> {
    if let ChainStatus::BrokenAt(k) = ledger.verify_chain() {
        return Err(Error::Ledger(format!("chain broken at entry {k}")));
    }
    let mut mismatches = Vec::new();
    let records = ledger.records()?;
    for rec in &records {
        let fresh = settle(econ.unwrap_or(&rec.econ), &rec.stakes, &rec.score_matrix)?;
        compare_statements(&mut mismatches, rec.round, &rec.reward_statement, &fresh);
        compare(&mut mismatches, rec.round, "record.consensus", &rec.consensus, &fresh.consensus);
    }
    Ok(ReplayReport {
        rounds: records.len(),
        mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economics::{ScoreMatrix, Stake, StakeBook};
    use std::collections::BTreeMap;

    fn record(round: u64, scores: Vec<Vec<f64>>) -> RoundRecord {
        let stakes = StakeBook::new(
            vec![Stake::solo(3.0), Stake::new(1.0, 2.0, 0.25).unwrap()],
            vec![Stake::solo(2.0), Stake::solo(1.0)],
        )
        .unwrap();
        let econ = EconParams::default();
        let score_matrix = ScoreMatrix::from_rows(scores).unwrap();
        let reward_statement = settle(&econ, &stakes, &score_matrix).unwrap();
        RoundRecord {
            round,
            submissions: vec!["00".repeat(32); 2],
            consensus: reward_statement.consensus.clone(),
            score_matrix,
            accepted: vec![0, 1],
            slashes: BTreeMap::new(),
            stakes,
            econ,
            reward_statement,
            global_digest: "11".repeat(32),
        }
    }

    fn log(n: u64) -> Ledger {
        let mut l = Ledger::new();
        for r in 0..n {
            l.append(&record(r, vec![vec![0.5, 0.7], vec![0.6, 0.1 * r as f64]])).unwrap();
        }
        l
    }

    #[test]
    fn chaining() {
        let l = log(2);
        assert_eq!(l.entries()[0].index, 0);
        assert_eq!(l.entries()[0].prev_digest, [0; 32]);
        assert_eq!(l.entries()[1].prev_digest, l.entries()[0].digest);
        assert_eq!(l.verify_chain(), ChainStatus::Ok);
    }

    #[test]
    fn payload_flip_is_located() {
        let mut l = log(4);
        l.entries_mut()[2].payload[5] ^= 0x01;
        assert_eq!(l.verify_chain(), ChainStatus::BrokenAt(2));
    }

    #[test]
    fn reorder_is_located_at_earlier_index() {
        let mut l = log(5);
        l.entries_mut().swap(1, 3);
        assert_eq!(l.verify_chain(), ChainStatus::BrokenAt(1));
    }

    #[test]
    fn binary_round_trip_and_truncation() {
        let l = log(3);
        let bytes = l.to_bytes();
        assert_eq!(Ledger::from_bytes(&bytes).unwrap(), l);
        assert!(Ledger::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Ledger::from_bytes(b"NOTALEDG").is_err());
        assert_eq!(Ledger::from_bytes(MAGIC).unwrap().len(), 0);
    }

    #[test]
    fn replay_honest_and_perturbed() {
        let l = log(3);
        let rep = replay_settlements(&l, &EconParams::default()).unwrap();
        assert!(rep.is_ok());
        assert_eq!(rep.rounds, 3);

        let mut bad = Ledger::new();
        for r in 0..3 {
            let mut rec = record(r, vec![vec![0.2, 0.9], vec![0.4, 0.8]]);
            if r == 1 {
                rec.reward_statement.validator_operator_rewards[1] += 1e-3;
            }
            bad.append(&rec).unwrap();
        }
        let rep = replay_settlements(&bad, &EconParams::default()).unwrap();
        assert!(!rep.is_ok());
        assert!(rep.mismatches.iter().all(|m| m.round == 1));

        let mut broken = log(2);
        broken.entries_mut()[0].digest[0] ^= 0x80;
        assert!(replay_settlements(&broken, &EconParams::default()).is_err());
    }

    #[test]
    fn canonical_payload_is_compact_json() {
        let l = log(1);
        let text = std::str::from_utf8(&l.entries()[0].payload).unwrap();
        assert!(text.starts_with("{\"round\":0,\"submissions\":["));
        assert!(!text.contains(' ') && !text.contains('\n'));
    }
}
