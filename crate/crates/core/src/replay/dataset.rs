//! Line-delimited JSON episode files.
//!
//! Record 0 is a header carrying the schema version and the full
//! environment spec; records `1..=N` hold one episode each. Every record
//! repeats the schema version and environment id so that a single line can be
//! checked on its own. Floats are written with shortest round-trip formatting,
//! so `write -> read -> write` reproduces the file byte for byte.
//!
//! ```text
//! {"schema_version":1,"env":{...EnvSpec...},"episodes":N}
//! {"schema_version":1,"env_id":"reach2d","states":[[..],..],"actions":[..],"rewards":[..],"dones":[..],"success":false,"provenance":"..."}
//! ```

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvId, EnvSpec, Episode};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    env: EnvSpec,
    episodes: usize,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    schema_version: u32,
    env_id: EnvId,
    #[serde(flatten)]
    episode: &'a Episode,
}

#[derive(Deserialize)]
struct Record {
    schema_version: u32,
    env_id: EnvId,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    success: bool,
    provenance: String,
}

/// An environment spec together with the episodes recorded in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvSpec,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(env: EnvSpec, episodes: Vec<Episode>) -> Self {
        Self { env, episodes }
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        let header = Header { schema_version: SCHEMA_VERSION, env: self.env.clone(), episodes: self.episodes.len() };
        serde_json::to_writer(&mut out, &header).map_err(|e| Error::Format { record: 0, reason: e.to_string() })?;
        out.write_all(b"\n")?;
        for (i, episode) in self.episodes.iter().enumerate() {
            let rec = RecordRef { schema_version: SCHEMA_VERSION, env_id: self.env.id, episode };
            serde_json::to_writer(&mut out, &rec)
                .map_err(|e| Error::Format { record: i + 1, reason: e.to_string() })?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// Parses and validates a whole file; the first bad record aborts with
    /// its index (header = 0).
    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let first = lines.next().ok_or_else(|| Error::Format { record: 0, reason: "empty file".into() })??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| Error::Format { record: 0, reason: e.to_string() })?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                record: 0,
                reason: format!("unsupported schema version {}", header.schema_version),
            });
        }
        header.env.validate().map_err(|e| Error::Format { record: 0, reason: e.to_string() })?;
        let (sd, ad) = (header.env.state_dim(), header.env.action_dim());
        let mut episodes = Vec::with_capacity(header.episodes);
        for (i, line) in lines.enumerate() {
            let record = i + 1;
            let line = line?;
            let bad = |reason: String| Error::Format { record, reason };
            let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if rec.schema_version != SCHEMA_VERSION {
                return Err(bad(format!("unsupported schema version {}", rec.schema_version)));
            }
            if rec.env_id != header.env.id {
                return Err(bad(format!("env id {} differs from header {}", rec.env_id.as_str(), header.env.id.as_str())));
            }
            let ep = Episode {
                states: rec.states,
                actions: rec.actions,
                rewards: rec.rewards,
                dones: rec.dones,
                success: rec.success,
                provenance: rec.provenance,
            };
            ep.validate(sd, ad).map_err(bad)?;
            episodes.push(ep);
        }
        if episodes.len() != header.episodes {
            return Err(Error::Format {
                record: episodes.len() + 1,
                reason: format!("header announces {} episodes, found {}", header.episodes, episodes.len()),
            });
        }
        Ok(Self { env: header.env, episodes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
