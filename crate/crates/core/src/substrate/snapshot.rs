//! Per-node EPC snapshot text, modelled on the driver's proc files.
//!
//! One line per enclave, in launch order:
//!
//! ```text
//! <enclave_id> <measurement_hex> <resident_pages> <system_flag:0|1>
//! ```
//!
//! followed by exactly one stats line `<pages_in_total> <pages_out_total>`.
//! Fields are separated by a single space and every line ends in `\n`.

use serde::{Deserialize, Serialize};

use super::{EnclaveId, Measurement, SubstrateError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEnclave {
    pub enclave_id: EnclaveId,
    #[serde(with = "measurement_hex")]
    pub measurement: Measurement,
    pub resident_pages: u64,
    pub system: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpcSnapshot {
    pub enclaves: Vec<SnapshotEnclave>,
    pub pages_in_total: u64,
    pub pages_out_total: u64,
}

impl EpcSnapshot {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.enclaves {
            out.push_str(&format!(
                "{} {} {} {}\n",
                e.enclave_id,
                e.measurement.to_hex(),
                e.resident_pages,
                u8::from(e.system)
            ));
        }
        out.push_str(&format!("{} {}\n", self.pages_in_total, self.pages_out_total));
        out
    }
}

pub fn parse_snapshot(text: &str) -> Result<EpcSnapshot, SubstrateError> {
    let bad = |m: &str| SubstrateError::MalformedSnapshot(m.to_owned());
    let lines: Vec<&str> = text
        .strip_suffix('\n')
        .ok_or_else(|| bad("missing trailing newline"))?
        .split('\n')
        .collect();
    let (stats, enclave_lines) = lines.split_last().ok_or_else(|| bad("empty"))?;
    let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad integer"));

    let mut enclaves = Vec::with_capacity(enclave_lines.len());
    for line in enclave_lines {
        let f: Vec<&str> = line.split(' ').collect();
        let [id, m, pages, sys] = f.as_slice() else {
            return Err(bad("enclave line needs 4 fields"));
        };
        let enclave_id = EnclaveId::new(*id);
        if !enclave_id.is_well_formed() {
            return Err(bad("enclave id"));
        }
        enclaves.push(SnapshotEnclave {
            enclave_id,
            measurement: Measurement::from_hex(m).ok_or_else(|| bad("measurement"))?,
            resident_pages: num(pages)?,
            system: match *sys {
                "0" => false,
                "1" => true,
                _ => return Err(bad("system flag")),
            },
        });
    }
    let f: Vec<&str> = stats.split(' ').collect();
    let [pin, pout] = f.as_slice() else {
        return Err(bad("stats line needs 2 fields"));
    };
    Ok(EpcSnapshot {
        enclaves,
        pages_in_total: num(pin)?,
        pages_out_total: num(pout)?,
    })
}

mod measurement_hex {
    use super::Measurement;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Measurement, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&m.to_hex())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Measurement, D::Error> {
        let s = String::deserialize(d)?;
        Measurement::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad measurement hex"))
    }
}
