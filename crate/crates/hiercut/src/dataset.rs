//! Generated datasets on disk: a JSON manifest plus one PPM image, one
//! 16-bit instance PGM and one 8-bit class PGM per patch.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use hiercut_core::synth::{generate_image, rgb_to_tensor, split_indices, AppearanceSpec, GenerateParams, Split};
use hiercut_core::train::Sample;
use hiercut_core::{ClassTree, Fingerprint, LabelSet, MaskPair, NodeSpec};
use serde::{Deserialize, Serialize};

use crate::error::{read, read_text, write, Error, Result};
use crate::netpbm::{self, Pixels};

pub const MANIFEST_FORMAT: &str = "hiercut-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTriple {
    pub image: String,
    pub instances: String,
    pub classes: String,
}

/// Paths in `files` are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub name: String,
    pub tree: NodeSpec,
    pub tree_fingerprint: Fingerprint,
    pub cut: Vec<String>,
    pub cut_fingerprint: Fingerprint,
    pub patch_size: usize,
    pub image_count: usize,
    pub seed: u64,
    pub generator: GenerateParams,
    pub appearance: AppearanceSpec,
    pub appearance_hash: Fingerprint,
    pub files: Vec<FileTriple>,
}

#[derive(Debug, Clone)]
pub struct GenerateRequest<'a> {
    pub name: &'a str,
    pub tree: &'a ClassTree,
    pub cut: &'a LabelSet,
    pub appearance: &'a AppearanceSpec,
    pub seed: u64,
    pub images: usize,
    pub patch_size: usize,
}

/// Generates every patch in memory, then writes the files and the manifest
/// into `out_dir`. Nothing is written if generation fails.
pub fn generate_dataset(req: &GenerateRequest, out_dir: &Path) -> Result<DatasetManifest> {
    if req.cut.len() > 255 {
        return Err(Error::data("8-bit class maps hold at most 255 cut members"));
    }
    if req.images == 0 {
        return Err(Error::data("dataset needs at least one image"));
    }
    let params = GenerateParams::new(req.patch_size);
    let images = (0..req.images)
        .map(|i| generate_image(req.tree, req.cut, req.appearance, &params, hiercut_core::synth::image_seed(req.seed, i)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::data(e.to_string()))?;
    if images.iter().any(|img| img.masks.instances().iter().any(|&id| id > u16::MAX as u32)) {
        return Err(Error::data("instance ids exceed 16 bits"));
    }

    let size = req.patch_size;
    let mut files = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let triple = FileTriple {
            image: format!("images/{i:04}.ppm"),
            instances: format!("instances/{i:04}.pgm"),
            classes: format!("classes/{i:04}.pgm"),
        };
        let inst: Vec<u16> = img.masks.instances().iter().map(|&v| v as u16).collect();
        let cls: Vec<u8> = img.masks.classes().iter().map(|&v| v as u8).collect();
        write(&out_dir.join(&triple.image), &netpbm::encode_ppm(size, size, &img.rgb))?;
        write(&out_dir.join(&triple.instances), &netpbm::encode_pgm16(size, size, &inst))?;
        write(&out_dir.join(&triple.classes), &netpbm::encode_pgm8(size, size, &cls))?;
        files.push(triple);
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        name: req.name.into(),
        tree: req.tree.to_spec(),
        tree_fingerprint: req.tree.fingerprint(),
        cut: req.cut.names().to_vec(),
        cut_fingerprint: req.cut.fingerprint(),
        patch_size: size,
        image_count: req.images,
        seed: req.seed,
        generator: params,
        appearance: req.appearance.clone(),
        appearance_hash: req.appearance.fingerprint(),
        files,
    };
    write(&out_dir.join(MANIFEST_FILE), manifest_json(&manifest).as_bytes())?;
    Ok(manifest)
}

pub fn manifest_json(manifest: &DatasetManifest) -> String {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    text
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            _ => Err(format!("unknown split {s:?} (expected train, val, test or all)")),
        }
    }
}

/// A loaded dataset with its seeded 70/15/15 split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
    pub tree: ClassTree,
    pub cut: LabelSet,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn indices(&self, which: SplitName) -> Vec<usize> {
        match which {
            SplitName::Train => self.split.train.clone(),
            SplitName::Val => self.split.val.clone(),
            SplitName::Test => self.split.test.clone(),
            SplitName::All => (0..self.samples.len()).collect(),
        }
    }

    pub fn subset(&self, which: SplitName) -> Vec<Sample> {
        self.indices(which).into_iter().map(|i| self.samples[i].clone()).collect()
    }

    /// Image file name of sample `i`, as listed in the manifest.
    pub fn image_name(&self, i: usize) -> &str {
        &self.manifest.files[i].image
    }
}

/// Accepts the manifest file or the directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(path);
    let text = read_text(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: malformed manifest: {e}", path.display())))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let at = |msg: String| Error::data(format!("{}: {msg}", path.display()));
    if manifest.format != MANIFEST_FORMAT {
        return Err(at(format!("unsupported format {:?}", manifest.format)));
    }
    let tree = ClassTree::from_spec(&manifest.tree).map_err(|e| at(e.to_string()))?;
    if tree.fingerprint() != manifest.tree_fingerprint {
        return Err(at(format!(
            "tree fingerprint {} does not match the embedded tree ({})",
            manifest.tree_fingerprint,
            tree.fingerprint()
        )));
    }
    let cut = LabelSet::new(&tree, &manifest.cut).map_err(|e| at(format!("invalid cut: {e}")))?;
    if cut.fingerprint() != manifest.cut_fingerprint {
        return Err(at("cut fingerprint does not match the cut names".into()));
    }
    if manifest.files.len() != manifest.image_count {
        return Err(at(format!("lists {} files for {} images", manifest.files.len(), manifest.image_count)));
    }
    let size = manifest.patch_size;
    if size == 0 || size % 4 != 0 {
        return Err(at(format!("patch size {size} is not a positive multiple of 4")));
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::with_capacity(manifest.files.len());
    for triple in &manifest.files {
        samples.push(load_sample(&dir, triple, size, cut.len())?);
    }
    let split = split_indices(samples.len(), manifest.seed);
    Ok(Dataset { manifest, dir, tree, cut, samples, split })
}

fn load_image(path: &Path, size: usize) -> Result<Pixels> {
    let img = netpbm::decode(&read(path)?).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if img.width != size || img.height != size {
        return Err(Error::data(format!("{}: {}x{} pixels, manifest says {size}x{size}", path.display(), img.width, img.height)));
    }
    Ok(img.pixels)
}

fn load_sample(dir: &Path, triple: &FileTriple, size: usize, members: usize) -> Result<Sample> {
    let image_path = dir.join(&triple.image);
    let Pixels::Rgb8(rgb) = load_image(&image_path, size)? else {
        return Err(Error::data(format!("{}: expected an RGB image", image_path.display())));
    };
    let inst_path = dir.join(&triple.instances);
    let instances: Vec<u32> = match load_image(&inst_path, size)? {
        Pixels::Gray16(v) => v.into_iter().map(u32::from).collect(),
        Pixels::Gray8(v) => v.into_iter().map(u32::from).collect(),
        Pixels::Rgb8(_) => return Err(Error::data(format!("{}: expected a grey instance map", inst_path.display()))),
    };
    let class_path = dir.join(&triple.classes);
    let Pixels::Gray8(cls) = load_image(&class_path, size)? else {
        return Err(Error::data(format!("{}: expected an 8-bit class map", class_path.display())));
    };
    if let Some(bad) = cls.iter().find(|&&v| v as usize > members) {
        return Err(Error::data(format!(
            "{}: class value {bad} exceeds the cut's {members} members",
            class_path.display()
        )));
    }
    let classes = cls.into_iter().map(u32::from).collect();
    let masks = MaskPair::new(size, size, instances, classes)
        .map_err(|e| Error::data(format!("{} / {}: {e}", inst_path.display(), class_path.display())))?;
    Ok(Sample { image: rgb_to_tensor(&rgb, size, size), masks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_names_parse() {
        assert_eq!("test".parse::<SplitName>(), Ok(SplitName::Test));
        assert!("holdout".parse::<SplitName>().is_err());
    }
}
