use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusSchema, Dataset, RoutingInstance, SplitTag};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

/// Sidecar stored next to the record file: split tag and the schema the
/// records were drawn from.
#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    split: SplitTag,
    schema: CorpusSchema,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes one JSON record per line plus a `<path>.meta.json` sidecar.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in &dataset.instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        split: dataset.split,
        schema: dataset.schema.clone(),
    };
    let mp = meta_path(path);
    std::fs::write(&mp, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&mp, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mp = meta_path(path);
    let meta_text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Schema(format!("{}: {e}", mp.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "{}: unsupported format version {}",
            mp.display(),
            meta.format_version
        )));
    }
    meta.schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let inst: RoutingInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        meta.schema
            .validate_instance(&inst)
            .map_err(|msg| Error::Parse { line: lineno, msg })?;
        if !ids.insert(inst.instance_id.clone()) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate instance_id {}", inst.instance_id),
            });
        }
        instances.push(inst);
    }
    Ok(Dataset {
        instances,
        schema: meta.schema,
        split: meta.split,
    })
}
