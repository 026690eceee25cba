use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attention::{AttentionMap, Direction};
use crate::error::{Error, Result};

pub fn attention_file_name(layer: usize, direction: Direction) -> String {
    format!("attention_layer{layer}_{direction}.csv")
}

/// Writes one CSV per (layer, direction) under `dir` with header
/// `window,sequence,row,col,weight`. Returns the written paths in layer order.
pub fn write_attention_csvs(maps: &[AttentionMap], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups: BTreeMap<(usize, Direction), Vec<&AttentionMap>> = BTreeMap::new();
    for m in maps {
        groups.entry((m.layer, m.direction)).or_default().push(m);
    }
    let mut paths = Vec::with_capacity(groups.len());
    for ((layer, direction), group) in groups {
        let path = dir.join(attention_file_name(layer, direction));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let write = || -> std::io::Result<()> {
            writeln!(out, "window,sequence,row,col,weight")?;
            for m in group {
                let l = m.weights.shape()[0];
                for r in 0..l {
                    for c in 0..l {
                        writeln!(out, "{},{},{r},{c},{}", m.window, m.sequence, m.weights.get(&[r, c]))?;
                    }
                }
            }
            out.flush()
        };
        write().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
