//! Checkpoint files.
//!
//! Layout (little-endian): magic `PPFK`, `u32` version, `u32` line count and
//! that many length-prefixed `key=value` config lines, `u32` record count,
//! then records of `name` (length-prefixed UTF-8), `u8` kind and payload.
//! Kind 0 is a `PTNS` tensor, kind 1 a `u32`-counted `u32` array, kind 2 a
//! `u32`-counted `u64` array.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::wire::{self, Reader};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PPFK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
enum Record {
    Tensor(Tensor),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

fn put_record(out: &mut Vec<u8>, name: &str, rec: &Record) {
    wire::put_string(out, name);
    match rec {
        Record::Tensor(t) => {
            out.push(0);
            t.write_to(out);
        }
        Record::U32(v) => {
            out.push(1);
            wire::put_u32(out, v.len() as u32);
            v.iter().for_each(|&x| wire::put_u32(out, x));
        }
        Record::U64(v) => {
            out.push(2);
            wire::put_u32(out, v.len() as u32);
            v.iter().for_each(|&x| wire::put_u64(out, x));
        }
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<(String, Record)> {
    let name = r.string()?;
    let kind_at = r.offset();
    let rec = match r.u8()? {
        0 => Record::Tensor(Tensor::read_from(r)?),
        1 => {
            let n = r.u32()? as usize;
            Record::U32((0..n).map(|_| r.u32()).collect::<Result<_>>()?)
        }
        2 => {
            let n = r.u32()? as usize;
            Record::U64((0..n).map(|_| r.u64()).collect::<Result<_>>()?)
        }
        k => {
            return Err(Error::Format {
                offset: kind_at,
                msg: format!("unknown record kind {k}"),
            })
        }
    };
    Ok((name, rec))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        wire::put_u32(&mut out, CHECKPOINT_VERSION);
        let pairs = self.config.to_pairs();
        wire::put_u32(&mut out, pairs.len() as u32);
        for (k, v) in &pairs {
            wire::put_string(&mut out, &format!("{k}={v}"));
        }

        let mut records: Vec<(String, Record)> = Vec::new();
        for (name, t) in self.model.params.iter() {
            records.push((format!("param.{name}"), Record::Tensor(t.clone())));
        }
        let bank = &self.model.bank;
        records.push(("bank.global_class".into(), Record::U32(bank.global_class.clone())));
        records.push(("bank.local_class".into(), Record::U32(bank.local_class.clone())));
        records.push(("bank.fc_global".into(), Record::Tensor(bank.fc_global.clone())));
        records.push(("bank.fc_local".into(), Record::Tensor(bank.fc_local.clone())));
        for (i, name) in self.model.params.names().iter().enumerate() {
            records.push((format!("adam.m.{name}"), Record::Tensor(self.optimizer.m[i].clone())));
            records.push((format!("adam.v.{name}"), Record::Tensor(self.optimizer.v[i].clone())));
        }
        let seed = self.rng.get_seed();
        let word_pos = self.rng.get_word_pos();
        records.push((
            "rng.seed".into(),
            Record::U64(seed.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        ));
        records.push((
            "state".into(),
            Record::U64(vec![
                self.epoch,
                self.optimizer.step,
                self.rng.get_stream(),
                word_pos as u64,
                (word_pos >> 64) as u64,
            ]),
        ));
        wire::put_u32(&mut out, records.len() as u32);
        for (name, rec) in &records {
            put_record(&mut out, name, rec);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version_at = r.offset();
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: version_at,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let n_lines = r.u32()? as usize;
        let mut text = String::new();
        for _ in 0..n_lines {
            text.push_str(&r.string()?);
            text.push('\n');
        }
        let config = TrainConfig::parse(&text)?;
        // Any RNG gives the right layout; every value is overwritten below.
        let mut model = Model::init(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;

        let n_records = r.u32()? as usize;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            records.push(read_record(&mut r)?);
        }
        if !r.is_empty() {
            return r.fail("trailing bytes after checkpoint");
        }
        let end = r.offset();
        let missing = |name: &str| Error::Format {
            offset: end,
            msg: format!("missing or mistyped record `{name}`"),
        };
        let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, r)| r);
        let tensor = |name: &str| match find(name) {
            Some(Record::Tensor(t)) => Ok(t.clone()),
            _ => Err(missing(name)),
        };
        let u32s = |name: &str| match find(name) {
            Some(Record::U32(v)) => Ok(v.clone()),
            _ => Err(missing(name)),
        };
        let u64s = |name: &str| match find(name) {
            Some(Record::U64(v)) => Ok(v.clone()),
            _ => Err(missing(name)),
        };

        let names: Vec<String> = model.params.names().to_vec();
        let entries = names
            .iter()
            .map(|n| Ok((n.clone(), tensor(&format!("param.{n}"))?)))
            .collect::<Result<Vec<_>>>()?;
        model.params.load(&entries).map_err(|e| Error::Format {
            offset: end,
            msg: e.to_string(),
        })?;
        let check_same = |what: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Format {
                    offset: end,
                    msg: format!("{what} disagrees with the config"),
                })
            }
        };
        check_same("bank.global_class", u32s("bank.global_class")? == model.bank.global_class)?;
        check_same("bank.local_class", u32s("bank.local_class")? == model.bank.local_class)?;
        check_same("bank.fc_global", tensor("bank.fc_global")?.shape() == model.bank.fc_global.shape())?;
        check_same("bank.fc_local", tensor("bank.fc_local")?.shape() == model.bank.fc_local.shape())?;
        model.bank.fc_global = tensor("bank.fc_global")?;
        model.bank.fc_local = tensor("bank.fc_local")?;

        let mut optimizer = AdamW::new(
            &model.params,
            config.beta1,
            config.beta2,
            config.adam_eps,
            config.weight_decay,
        );
        for (i, n) in names.iter().enumerate() {
            let m = tensor(&format!("adam.m.{n}"))?;
            let v = tensor(&format!("adam.v.{n}"))?;
            check_same("optimizer moment shape", m.shape() == optimizer.m[i].shape() && v.shape() == optimizer.v[i].shape())?;
            optimizer.m[i] = m;
            optimizer.v[i] = v;
        }
        let state = u64s("state")?;
        let seed_words = u64s("rng.seed")?;
        if state.len() != 5 || seed_words.len() != 4 {
            return Err(missing("state"));
        }
        optimizer.step = state[1];
        let mut seed = [0u8; 32];
        for (i, w) in seed_words.iter().enumerate() {
            seed[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state[2]);
        rng.set_word_pos(state[3] as u128 | ((state[4] as u128) << 64));
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            epoch: state[0],
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
