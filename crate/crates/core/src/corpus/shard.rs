use std::fs;
use std::io::Write;
use std::path::Path;

use super::TrainingExample;
use crate::error::{Error, Result};
use crate::signal::{read_mel, write_mel};

pub const INDEX_FILE: &str = "index.tsv";
pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// 90/5/5 by position in the generated order.
    pub fn of(index: usize, total: usize) -> Split {
        let train = total * 90 / 100;
        let valid = total * 95 / 100;
        if index < train {
            Split::Train
        } else if index < valid {
            Split::Valid
        } else {
            Split::Test
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => SPLIT_NAMES[0],
            Split::Valid => SPLIT_NAMES[1],
            Split::Test => SPLIT_NAMES[2],
        }
    }
}

/// Writes `T2MEL1` files plus the tab-separated index into `dir`.
pub fn write_shard(dir: &Path, examples: &[TrainingExample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for e in examples {
        if e.id.is_empty() || e.id.contains(['\t', '/', '\n']) {
            return Err(Error::Data(format!("example id {:?} is not a plain file stem", e.id)));
        }
        let src = format!("{}.src.mel", e.id);
        let tgt = format!("{}.tgt.mel", e.id);
        write_mel(&dir.join(&src), &e.source_mel)?;
        write_mel(&dir.join(&tgt), &e.target_mel)?;
        let phon = e.target_phonemes.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",");
        let spk = e.speakers.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+");
        index.push_str(&format!("{}\t{src}\t{tgt}\t{phon}\t{spk}\n", e.id));
    }
    let mut f = fs::File::create(dir.join(INDEX_FILE))?;
    f.write_all(index.as_bytes())?;
    Ok(())
}

pub fn read_shard(dir: &Path) -> Result<Vec<TrainingExample>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", index_path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |d: &str| Error::Data(format!("{}:{}: {d}", index_path.display(), n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 tab-separated columns"));
        }
        let target_phonemes = cols[3]
            .split(',')
            .map(|p| p.parse::<usize>().map_err(|_| bad("bad phoneme id")))
            .collect::<Result<Vec<_>>>()?;
        let speakers = cols[4]
            .split('+')
            .map(|p| p.parse::<u32>().map_err(|_| bad("bad speaker id")))
            .collect::<Result<Vec<_>>>()?;
        let e = TrainingExample {
            id: cols[0].to_string(),
            source_mel: read_mel(&dir.join(cols[1]))?,
            target_mel: read_mel(&dir.join(cols[2]))?,
            target_phonemes,
            speakers,
        };
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}
