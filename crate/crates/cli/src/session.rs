//! Composer sessions as an append-only event log. Current state is always
//! the fold of the log, so a reloaded session equals the live one.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stemflow::codec::{ActivityMask, StemLatent};
use stemflow::corpus::{tempo_bucket, StemType, NUM_STYLES};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStem {
    pub stem_id: String,
    pub stem_type: StemType,
    /// Row-major frames x latent dim.
    pub latent: Vec<f64>,
    pub activity_mask: ActivityMask,
    /// Mask the stem was requested with, if any.
    pub requested_mask: Option<ActivityMask>,
    pub muted: bool,
    /// Request id of the generation that produced the stem.
    pub produced_by: String,
}

impl SessionStem {
    pub fn latent(&self) -> StemLatent {
        StemLatent::from_vec(self.activity_mask.len(), self.latent.clone()).expect("stored latent matches its mask")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub request_id: String,
    pub stem_types: Vec<StemType>,
    pub condition_on: Vec<String>,
    pub sampler: SamplerSettings,
    pub stem_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        style_token: usize,
        tempo_bpm: u32,
        frames: usize,
        seed: u64,
        checkpoint: String,
    },
    Generated {
        record: GenerationRecord,
        stems: Vec<SessionStem>,
    },
    Muted {
        stem_id: String,
        muted: bool,
    },
    Removed {
        stem_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub style_token: usize,
    pub tempo_bpm: u32,
    pub frames: usize,
    pub checkpoint: String,
    pub seed: u64,
    /// Generations so far; each one consumes a seed.
    pub seed_counter: u64,
    pub stems: Vec<SessionStem>,
    pub history: Vec<GenerationRecord>,
    #[serde(skip)]
    removed: BTreeSet<String>,
}

impl Session {
    pub fn validate_create(style_token: usize, tempo_bpm: u32, frames: usize) -> Result<(), ServiceError> {
        if style_token >= NUM_STYLES {
            return Err(ServiceError::Invalid(format!(
                "style token {style_token} outside 0..{NUM_STYLES}"
            )));
        }
        tempo_bucket(tempo_bpm).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        if frames == 0 {
            return Err(ServiceError::Invalid("sessions need at least one frame".into()));
        }
        Ok(())
    }

    /// Rebuild a session from its log.
    pub fn replay(events: &[Event]) -> Result<Self, ServiceError> {
        let mut iter = events.iter();
        let mut session = match iter.next() {
            Some(Event::Created {
                session_id,
                style_token,
                tempo_bpm,
                frames,
                seed,
                checkpoint,
            }) => Session {
                session_id: session_id.clone(),
                style_token: *style_token,
                tempo_bpm: *tempo_bpm,
                frames: *frames,
                checkpoint: checkpoint.clone(),
                seed: *seed,
                seed_counter: 0,
                stems: Vec::new(),
                history: Vec::new(),
                removed: BTreeSet::new(),
            },
            _ => return Err(ServiceError::Corrupt("log does not start with a creation event".into())),
        };
        for e in iter {
            session.apply(e)?;
        }
        Ok(session)
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), ServiceError> {
        match event {
            Event::Created { .. } => return Err(ServiceError::Corrupt("second creation event".into())),
            Event::Generated { record, stems } => {
                for s in stems {
                    if self.stem(&s.stem_id).is_some() || self.removed.contains(&s.stem_id) {
                        return Err(ServiceError::Corrupt(format!("stem id {} reused", s.stem_id)));
                    }
                }
                self.stems.extend(stems.iter().cloned());
                self.history.push(record.clone());
                self.seed_counter += 1;
            }
            Event::Muted { stem_id, muted } => {
                let stem = self
                    .stems
                    .iter_mut()
                    .find(|s| &s.stem_id == stem_id)
                    .ok_or_else(|| ServiceError::Corrupt(format!("mute of unknown stem {stem_id}")))?;
                stem.muted = *muted;
            }
            Event::Removed { stem_id } => {
                let pos = self
                    .stems
                    .iter()
                    .position(|s| &s.stem_id == stem_id)
                    .ok_or_else(|| ServiceError::Corrupt(format!("removal of unknown stem {stem_id}")))?;
                self.stems.remove(pos);
                self.removed.insert(stem_id.clone());
            }
        }
        Ok(())
    }

    pub fn stem(&self, stem_id: &str) -> Option<&SessionStem> {
        self.stems.iter().find(|s| s.stem_id == stem_id)
    }

    pub fn was_removed(&self, stem_id: &str) -> bool {
        self.removed.contains(stem_id)
    }

    pub fn generation(&self, request_id: &str) -> Option<&GenerationRecord> {
        self.history.iter().find(|r| r.request_id == request_id)
    }

    pub fn next_seed(&self) -> u64 {
        self.seed.wrapping_add(self.seed_counter)
    }
}

/// One JSON event per line under `<data dir>/sessions/<id>.jsonl`.
#[derive(Debug, Clone)]
pub struct EventLog {
    dir: PathBuf,
}

impl EventLog {
    pub fn open(data_dir: &Path) -> Result<Self, ServiceError> {
        let dir = data_dir.join("sessions");
        fs::create_dir_all(&dir).map_err(|e| ServiceError::Storage(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    fn path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    pub fn append(&self, session_id: &str, event: &Event) -> Result<(), ServiceError> {
        let path = self.path(session_id);
        let mut line = serde_json::to_vec(event).map_err(|e| ServiceError::Storage(e.to_string()))?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
        f.write_all(&line)
            .and_then(|_| f.sync_data())
            .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))
    }

    pub fn read(&self, session_id: &str) -> Result<Option<Vec<Event>>, ServiceError> {
        let path = self.path(session_id);
        let f = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(ServiceError::Storage(format!("{}: {e}", path.display()))),
        };
        let mut events = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| ServiceError::Storage(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(e) => events.push(e),
                // a torn final line from a crash mid-append
                Err(e) if e.is_eof() => break,
                Err(e) => return Err(ServiceError::Corrupt(format!("{}: {e}", path.display()))),
            }
        }
        Ok(Some(events))
    }

    pub fn is_valid_id(session_id: &str) -> bool {
        !session_id.is_empty() && session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn created() -> Event {
        Event::Created {
            session_id: "s1".into(),
            style_token: 2,
            tempo_bpm: 120,
            frames: 4,
            seed: 10,
            checkpoint: "m.sfck".into(),
        }
    }

    fn stem(id: &str, t: StemType) -> SessionStem {
        SessionStem {
            stem_id: id.into(),
            stem_type: t,
            latent: vec![0.0; 32],
            activity_mask: ActivityMask::all(4, false),
            requested_mask: None,
            muted: false,
            produced_by: "r".into(),
        }
    }

    fn generated(req: &str, stems: Vec<SessionStem>) -> Event {
        Event::Generated {
            record: GenerationRecord {
                request_id: req.into(),
                stem_types: stems.iter().map(|s| s.stem_type).collect(),
                condition_on: vec![],
                sampler: SamplerSettings {
                    steps: 4,
                    cfg_scale: 3.0,
                    seed: 10,
                },
                stem_ids: stems.iter().map(|s| s.stem_id.clone()).collect(),
            },
            stems,
        }
    }

    #[test]
    fn replay_folds_events() {
        let events = vec![
            created(),
            generated("a", vec![stem("x", StemType::Drums)]),
            generated("b", vec![stem("y", StemType::Bass), stem("z", StemType::Keys)]),
            Event::Muted {
                stem_id: "y".into(),
                muted: true,
            },
            Event::Removed { stem_id: "x".into() },
        ];
        let s = Session::replay(&events).unwrap();
        assert_eq!(s.history.len(), 2);
        assert_eq!(s.seed_counter, 2);
        assert_eq!(s.next_seed(), 12);
        let ids: Vec<&str> = s.stems.iter().map(|s| s.stem_id.as_str()).collect();
        assert_eq!(ids, ["y", "z"]);
        assert!(s.stem("y").unwrap().muted);
        assert!(s.was_removed("x"));
    }

    #[test]
    fn replay_rejects_bad_logs() {
        assert!(Session::replay(&[]).is_err());
        assert!(Session::replay(&[Event::Removed { stem_id: "x".into() }]).is_err());
        let dup = vec![
            created(),
            generated("a", vec![stem("x", StemType::Drums)]),
            generated("b", vec![stem("x", StemType::Bass)]),
        ];
        assert!(Session::replay(&dup).is_err());
    }

    #[test]
    fn log_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let log = EventLog::open(dir.path()).unwrap();
        assert!(log.read("s1").unwrap().is_none());
        let events = vec![created(), generated("a", vec![stem("x", StemType::Drums)])];
        for e in &events {
            log.append("s1", e).unwrap();
        }
        assert_eq!(log.read("s1").unwrap().unwrap(), events);
        let path = dir.path().join("sessions/s1.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"event\":\"muted\",\"stem_").unwrap();
        assert_eq!(log.read("s1").unwrap().unwrap(), events);
    }

    #[test]
    fn create_validation() {
        assert!(Session::validate_create(0, 120, 96).is_ok());
        assert!(Session::validate_create(NUM_STYLES, 120, 96).is_err());
        assert!(Session::validate_create(0, 121, 96).is_err());
        assert!(Session::validate_create(0, 120, 0).is_err());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Generate(usize),
        Mute(usize, bool),
        Remove(usize),
    }

    fn op() -> impl proptest::strategy::Strategy<Value = Op> {
        use proptest::prelude::*;
        prop_oneof![
            (1usize..4).prop_map(Op::Generate),
            (0usize..8, any::<bool>()).prop_map(|(i, m)| Op::Mute(i, m)),
            (0usize..8).prop_map(Op::Remove),
        ]
    }

    proptest::proptest! {
        #[test]
        fn live_state_equals_replay(ops in proptest::collection::vec(op(), 0..24)) {
            let dir = tempfile::tempdir().unwrap();
            let log = EventLog::open(dir.path()).unwrap();
            let first = created();
            log.append("s1", &first).unwrap();
            let mut live = Session::replay(std::slice::from_ref(&first)).unwrap();
            let mut next_id = 0;
            for (n, op) in ops.into_iter().enumerate() {
                let event = match op {
                    Op::Generate(k) => {
                        let stems = (0..k)
                            .map(|j| {
                                next_id += 1;
                                stem(&format!("x{next_id}"), StemType::ALL[j])
                            })
                            .collect();
                        generated(&format!("r{n}"), stems)
                    }
                    Op::Mute(i, muted) if i < live.stems.len() => Event::Muted {
                        stem_id: live.stems[i].stem_id.clone(),
                        muted,
                    },
                    Op::Remove(i) if i < live.stems.len() => Event::Removed {
                        stem_id: live.stems[i].stem_id.clone(),
                    },
                    _ => continue,
                };
                live.apply(&event).unwrap();
                log.append("s1", &event).unwrap();
            }
            let replayed = Session::replay(&log.read("s1").unwrap().unwrap()).unwrap();
            proptest::prop_assert_eq!(&replayed, &live);
            let ids: BTreeSet<&str> = live.stems.iter().map(|s| s.stem_id.as_str()).collect();
            proptest::prop_assert_eq!(ids.len(), live.stems.len());
        }
    }
}
