//! Binary encoding of client uploads and server payloads.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "FDW1"
//! kind   u8        1 = update, 2 = payload
//! client u32
//! round  u32
//! count  u64       sample count (0 in payloads)
//! n      u32       tensor records
//! record: name_len u16, name bytes, role u8, rows u32, cols u32, rows*cols f64
//! ```
//!
//! Uploads carry shared tensors, the global bank and the prototype; the
//! decoder rejects anything else, and [`check_upload`] additionally scans
//! the raw bytes for personal names and known raw-data sequences.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{role_of, ParamSet, Role, GLOBAL_BANK};
use crate::protocol::{ClientUpdate, ServerPayload};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"FDW1";
const KIND_UPDATE: u8 = 1;
const KIND_PAYLOAD: u8 = 2;
pub const PROTOTYPE: &str = "prototype";

fn role_code(role: Role) -> u8 {
    match role {
        Role::Shared => 0,
        Role::Personal => 1,
        Role::Bank => 2,
        Role::Prototype => 3,
    }
}

fn role_from_code(code: u8) -> Result<Role> {
    match code {
        0 => Ok(Role::Shared),
        1 => Ok(Role::Personal),
        2 => Ok(Role::Bank),
        3 => Ok(Role::Prototype),
        c => Err(Error::Decode(format!("unknown role code {c}"))),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn header(kind: u8, client: usize, round: usize, count: usize, tensors: usize) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.push(kind);
        w.0.extend_from_slice(&(client as u32).to_le_bytes());
        w.0.extend_from_slice(&(round as u32).to_le_bytes());
        w.0.extend_from_slice(&(count as u64).to_le_bytes());
        w.0.extend_from_slice(&(tensors as u32).to_le_bytes());
        w
    }

    fn tensor(&mut self, name: &str, role: Role, m: &Matrix) {
        self.0.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.0.extend_from_slice(name.as_bytes());
        self.0.push(role_code(role));
        self.0.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        self.0.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Decode(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Message {
    kind: u8,
    client: usize,
    round: usize,
    count: usize,
    tensors: Vec<(String, Role, Matrix)>,
}

fn decode(bytes: &[u8]) -> Result<Message> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let kind = r.u8()?;
    let client = r.u32()? as usize;
    let round = r.u32()? as usize;
    let count = r.u64()? as usize;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Decode("tensor name is not UTF-8".into()))?;
        let name = String::from(name);
        let role = role_from_code(r.u8()?)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let bytes_needed = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Decode(format!("tensor {name} too large")))?;
        let raw = r.take(bytes_needed)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, role, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Message {
        kind,
        client,
        round,
        count,
        tensors,
    })
}

/// Checks that a name/role pair may travel over the wire.
fn admit(name: &str, role: Role) -> Result<()> {
    let ok = match role {
        Role::Shared => role_of(name) == Role::Shared,
        Role::Bank => name == GLOBAL_BANK,
        Role::Prototype => name == PROTOTYPE,
        Role::Personal => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::PrivacyViolation(format!("tensor {name} with role {} may not be sent", role.name())))
    }
}

pub fn encode_update(u: &ClientUpdate) -> Result<Vec<u8>> {
    let mut w = Writer::header(KIND_UPDATE, u.client_id, u.round, u.sample_count, u.shared.len() + 2);
    for (name, m) in u.shared.iter() {
        admit(name, Role::Shared)?;
        w.tensor(name, Role::Shared, m);
    }
    w.tensor(GLOBAL_BANK, Role::Bank, &u.bank);
    w.tensor(PROTOTYPE, Role::Prototype, &u.prototype);
    Ok(w.0)
}

pub fn decode_update(bytes: &[u8]) -> Result<ClientUpdate> {
    let msg = decode(bytes)?;
    if msg.kind != KIND_UPDATE {
        return Err(Error::Decode(format!("expected an update, found kind {}", msg.kind)));
    }
    let mut shared = ParamSet::new();
    let (mut bank, mut prototype) = (None, None);
    for (name, role, m) in msg.tensors {
        admit(&name, role)?;
        match role {
            Role::Shared => {
                shared.insert(name, m);
            }
            Role::Bank => bank = Some(m),
            Role::Prototype => prototype = Some(m),
            Role::Personal => unreachable!("rejected by admit"),
        }
    }
    Ok(ClientUpdate {
        client_id: msg.client,
        round: msg.round,
        sample_count: msg.count,
        shared,
        bank: bank.ok_or_else(|| Error::Decode("update lacks the bank".into()))?,
        prototype: prototype.ok_or_else(|| Error::Decode("update lacks the prototype".into()))?,
    })
}

pub fn encode_payload(p: &ServerPayload) -> Result<Vec<u8>> {
    let mut w = Writer::header(KIND_PAYLOAD, p.client_id, p.round, 0, p.shared.len() + 1);
    for (name, m) in p.shared.iter() {
        admit(name, Role::Shared)?;
        w.tensor(name, Role::Shared, m);
    }
    w.tensor(GLOBAL_BANK, Role::Bank, &p.bank);
    Ok(w.0)
}

pub fn decode_payload(bytes: &[u8]) -> Result<ServerPayload> {
    let msg = decode(bytes)?;
    if msg.kind != KIND_PAYLOAD {
        return Err(Error::Decode(format!("expected a payload, found kind {}", msg.kind)));
    }
    let mut shared = ParamSet::new();
    let mut bank = None;
    for (name, role, m) in msg.tensors {
        admit(&name, role)?;
        match role {
            Role::Shared => {
                shared.insert(name, m);
            }
            Role::Bank => bank = Some(m),
            _ => return Err(Error::Decode(format!("unexpected {name} in payload"))),
        }
    }
    Ok(ServerPayload {
        client_id: msg.client,
        round: msg.round,
        shared,
        bank: bank.ok_or_else(|| Error::Decode("payload lacks the bank".into()))?,
    })
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Privacy check on encoded upload bytes: the message must decode with only
/// admissible tensors, must not mention any of `personal_names`, and must
/// not contain any of `raw_sequences` as consecutive little-endian `f64`s.
pub fn check_upload(bytes: &[u8], personal_names: &[&str], raw_sequences: &[&[f64]]) -> Result<()> {
    let msg = decode(bytes)?;
    if msg.kind != KIND_UPDATE {
        return Err(Error::Decode("not an update".into()));
    }
    for (name, role, _) in &msg.tensors {
        admit(name, *role)?;
        if personal_names.contains(&name.as_str()) {
            return Err(Error::PrivacyViolation(format!("personal tensor {name} in upload")));
        }
    }
    for name in personal_names {
        if contains(bytes, name.as_bytes()) {
            return Err(Error::PrivacyViolation(format!("upload bytes mention {name}")));
        }
    }
    for seq in raw_sequences {
        let needle: Vec<u8> = seq.iter().flat_map(|v| v.to_le_bytes()).collect();
        if contains(bytes, &needle) {
            return Err(Error::PrivacyViolation("upload contains raw series values".into()));
        }
    }
    Ok(())
}
