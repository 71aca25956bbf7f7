//! On-disk corpus layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<split>/utterances.bin
//! ```
//!
//! `utterances.bin` is a back-to-back sequence of little-endian records:
//!
//! | field          | type        |
//! |----------------|-------------|
//! | T              | u32         |
//! | F              | u32         |
//! | label          | i32 (-1 = unlabeled) |
//! | utterance_id   | u64         |
//! | frames         | T·F × f64, row-major |

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusConfig, CorpusError, LanguageId, LanguageSpec, Split, Utterance};
use crate::diffkit::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const UTTERANCE_FILE: &str = "utterances.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub path: String,
    pub count: usize,
    pub labeled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub config: CorpusConfig,
    pub languages: Vec<LanguageSpec>,
    pub overlap: Vec<LanguageId>,
    pub nonoverlap: Vec<LanguageId>,
    pub splits: Vec<SplitEntry>,
}

pub fn write_split<W: Write>(out: &mut W, utterances: &[Utterance]) -> Result<(), CorpusError> {
    for u in utterances {
        let t = u32::try_from(u.num_frames())
            .map_err(|_| CorpusError::Format("utterance too long".into()))?;
        let f = u32::try_from(u.feature_dim())
            .map_err(|_| CorpusError::Format("feature dim too large".into()))?;
        let label: i32 = match u.label {
            Some(l) => i32::try_from(l)
                .map_err(|_| CorpusError::Format(format!("label {l} does not fit in i32")))?,
            None => -1,
        };
        out.write_all(&t.to_le_bytes())?;
        out.write_all(&f.to_le_bytes())?;
        out.write_all(&label.to_le_bytes())?;
        out.write_all(&u.utterance_id.to_le_bytes())?;
        for v in u.frames.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<bool, CorpusError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = input.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(CorpusError::Format("truncated utterance header".into()));
        }
        filled += n;
    }
    Ok(true)
}

pub fn read_split<R: Read>(input: &mut R) -> Result<Vec<Utterance>, CorpusError> {
    let mut out = Vec::new();
    let mut header = [0u8; 20];
    while read_exact_or_eof(input, &mut header)? {
        let t = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let label = i32::from_le_bytes(header[8..12].try_into().unwrap());
        let utterance_id = u64::from_le_bytes(header[12..20].try_into().unwrap());
        if t == 0 || f == 0 {
            return Err(CorpusError::Format(format!(
                "utterance {utterance_id}: empty frame block {t}x{f}"
            )));
        }
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as LanguageId),
            l => {
                return Err(CorpusError::Format(format!(
                    "utterance {utterance_id}: invalid label {l}"
                )))
            }
        };
        let mut raw = vec![0u8; t * f * 8];
        input
            .read_exact(&mut raw)
            .map_err(|_| CorpusError::Format(format!("utterance {utterance_id}: truncated frames")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Utterance {
            utterance_id,
            label,
            frames: Tensor::matrix(t, f, data).map_err(|e| CorpusError::Format(e.to_string()))?,
        });
    }
    Ok(out)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<Manifest, CorpusError> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub)?;
        let mut w = BufWriter::new(fs::File::create(sub.join(UTTERANCE_FILE))?);
        let utts = corpus.split(split);
        write_split(&mut w, utts)?;
        w.flush()?;
        splits.push(SplitEntry {
            name: split.name().to_string(),
            path: format!("{}/{}", split.name(), UTTERANCE_FILE),
            count: utts.len(),
            labeled: utts.iter().filter(|u| u.label.is_some()).count(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        master_seed: corpus.master_seed,
        config: corpus.config.clone(),
        languages: corpus.languages.clone(),
        overlap: corpus.overlap.clone(),
        nonoverlap: corpus.nonoverlap.clone(),
        splits,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CorpusError::Format(format!(
            "manifest version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    for spec in &manifest.languages {
        spec.validate()?;
    }
    let mut corpus = Corpus {
        config: manifest.config.clone(),
        master_seed: manifest.master_seed,
        languages: manifest.languages.clone(),
        pretrain: Vec::new(),
        finetune_train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        overlap: manifest.overlap.clone(),
        nonoverlap: manifest.nonoverlap.clone(),
    };
    for split in Split::ALL {
        let entry = manifest
            .splits
            .iter()
            .find(|e| e.name == split.name())
            .ok_or_else(|| CorpusError::Format(format!("manifest lacks split {}", split.name())))?;
        let mut r = BufReader::new(fs::File::open(dir.join(&entry.path))?);
        let utts = read_split(&mut r)?;
        if utts.len() != entry.count {
            return Err(CorpusError::Format(format!(
                "split {}: manifest lists {} utterances, file holds {}",
                split.name(),
                entry.count,
                utts.len()
            )));
        }
        let num_languages = corpus.languages.len() as LanguageId;
        if let Some(u) = utts
            .iter()
            .find(|u| u.feature_dim() != corpus.config.feature_dim || u.label.is_some_and(|l| l >= num_languages))
        {
            return Err(CorpusError::Format(format!(
                "split {}: utterance {} inconsistent with manifest",
                split.name(),
                u.utterance_id
            )));
        }
        *corpus.split_mut(split) = utts;
    }
    Ok(corpus)
}
