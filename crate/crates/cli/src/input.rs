use std::fs;
use std::path::{Path, PathBuf};

use tam_core::dump::{self, DumpError, FeatureDump, Mask, MANIFEST_FILE};

use crate::commands::CliError;

/// A conversation directory and the name its outputs are filed under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub name: String,
    pub dir: PathBuf,
}

impl Conversation {
    pub fn load(&self, masks: Option<&Path>) -> Result<FeatureDump, DumpError> {
        let mut d = dump::load_dump(&self.dir)?;
        if let Some(root) = masks {
            override_masks(&mut d, &root.join(&self.name))?;
            d.validate()?;
        }
        Ok(d)
    }
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "conversation".into())
}

/// Expands `inputs` into conversations, in argument order then name order.
/// Duplicate names are an error because outputs would collide.
pub fn discover(inputs: &[PathBuf]) -> Result<Vec<Conversation>, CliError> {
    let mut out = Vec::new();
    for path in inputs {
        if path.join(MANIFEST_FILE).is_file() {
            out.push(Conversation {
                name: dir_name(path),
                dir: path.clone(),
            });
            continue;
        }
        if !path.is_dir() {
            return Err(CliError::Input(format!("{}: not a dump or a directory of dumps", path.display())));
        }
        let mut found: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST_FILE).is_file())
            .collect();
        if found.is_empty() {
            return Err(CliError::Input(format!("{}: no dumps found", path.display())));
        }
        found.sort();
        out.extend(found.into_iter().map(|dir| Conversation {
            name: dir_name(&dir),
            dir,
        }));
    }
    let mut names: Vec<&str> = out.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(CliError::Input(format!("two conversations are named '{}'", w[0])));
    }
    Ok(out)
}

/// Replaces the dump's masks by `<lemma>_<frame>.png` files in `dir`.
/// A missing directory leaves the conversation without masks.
fn override_masks(d: &mut FeatureDump, dir: &Path) -> Result<(), DumpError> {
    d.masks.clear();
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    let frames = d.layout.frames();
    for path in files {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let field = format!("masks[{stem}]");
        let (name, frame) = stem
            .rsplit_once('_')
            .and_then(|(n, f)| Some((n.to_string(), f.parse::<usize>().ok()?)))
            .ok_or_else(|| DumpError::Invalid {
                field: field.clone(),
                reason: "expected <lemma>_<frame>.png".into(),
            })?;
        let (h, w, cells) = dump::read_mask_png(&path, &field)?;
        if let Some(slot) = frames.get(frame) {
            if (h, w) != (slot.height, slot.width) {
                return Err(DumpError::ShapeMismatch {
                    field,
                    expected: slot.len(),
                    actual: h * w,
                });
            }
        }
        d.masks.push(Mask { name, frame, cells });
    }
    Ok(())
}
