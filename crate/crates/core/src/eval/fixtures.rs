//! Bundled synthetic scenes, datasets, proposals and tensor dumps.
//!
//! `selfcorrect` holds two dogs. The left one carries a 1.5x attention bias
//! while nothing is masked, so a single pass lands on it; the expression asks
//! for the right one. `simple-*` are single-pass sanity scenes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backend::{Backend, BackendRequest, Blob, MaskMode, SceneLibrary, SyntheticBackend, SyntheticScene};
use crate::dump;
use crate::error::{Error, Result};
use crate::heatmap::BinaryMask;
use crate::igrs::request_tokens;
use crate::parser::Parser;
use crate::rle::{proposals_to_json, MaskProposal, Rle};

use super::dataset::{Dataset, EvalRecord, ImageMeta};

pub const SELFCORRECT_ID: &str = "selfcorrect";
pub const SELFCORRECT_EXPRESSION: &str = "the right dog";
/// Proposal id of the referred (right) dog.
pub const SELFCORRECT_TARGET: u64 = 2;
/// Proposal id of the biased (left) dog.
pub const SELFCORRECT_DISTRACTOR: u64 = 1;

fn blob(center: [f64; 2], sigma: f64, salience: f64, tag: &str) -> Blob {
    Blob {
        center,
        sigma,
        salience,
        tags: vec![tag.to_string()],
        relations: Vec::new(),
        distractor_bias: 1.0,
    }
}

pub fn selfcorrect_scene() -> SyntheticScene {
    let mut left = blob([16.0, 16.0], 12.0, 1.0, "dog");
    left.distractor_bias = 1.5;
    let mut right = blob([48.0, 16.0], 12.0, 0.9, "dog");
    right.relations = vec!["right".into()];
    SyntheticScene {
        image: SELFCORRECT_ID.into(),
        image_size: [64, 32],
        latent: [8, 16],
        blobs: vec![left, right],
    }
}

pub fn simple_scenes() -> Vec<SyntheticScene> {
    let mut dog = blob([34.0, 18.0], 5.0, 0.8, "dog");
    dog.relations = vec!["right".into()];
    vec![
        SyntheticScene {
            image: "simple-ball".into(),
            image_size: [48, 48],
            latent: [12, 12],
            blobs: vec![blob([30.0, 18.0], 6.0, 0.9, "ball")],
        },
        SyntheticScene {
            image: "simple-pair".into(),
            image_size: [48, 48],
            latent: [12, 12],
            blobs: vec![blob([12.0, 30.0], 5.0, 1.0, "cat"), dog],
        },
    ]
}

pub fn scene_library() -> SceneLibrary {
    let mut scenes = vec![selfcorrect_scene()];
    scenes.extend(simple_scenes());
    SceneLibrary { scenes }
}

/// Filled disk on an `x_px` by `y_px` grid.
pub fn disk(x_px: usize, y_px: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(y_px, x_px, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        dx * dx + dy * dy <= r * r
    })
}

fn union(a: &BinaryMask, b: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(a.height(), a.width(), |x, y| a.get(x, y) || b.get(x, y))
}

pub fn selfcorrect_proposals() -> Vec<MaskProposal> {
    let (w, h) = (64, 32);
    let left = disk(w, h, 16.0, 16.0, 10.0);
    let right = disk(w, h, 48.0, 16.0, 10.0);
    let both = union(&left, &right);
    let background = BinaryMask::from_fn(h, w, |x, y| !both.get(x, y));
    // thirteen separate 2x2 squares along the middle row
    let fragments = BinaryMask::from_fn(h, w, |x, y| (15..17).contains(&y) && x % 5 >= 1 && x % 5 <= 2);
    vec![
        MaskProposal { id: SELFCORRECT_DISTRACTOR, mask: left },
        MaskProposal { id: SELFCORRECT_TARGET, mask: right },
        MaskProposal { id: 3, mask: background },
        MaskProposal { id: 4, mask: fragments },
    ]
}

fn simple_proposals() -> Vec<(String, Vec<MaskProposal>, u64, String)> {
    let ball = vec![
        MaskProposal { id: 1, mask: disk(48, 48, 30.0, 18.0, 8.0) },
        MaskProposal { id: 2, mask: disk(48, 48, 12.0, 36.0, 8.0) },
        MaskProposal { id: 3, mask: BinaryMask::ones(48, 48) },
    ];
    let cat = disk(48, 48, 12.0, 30.0, 7.0);
    let dog = disk(48, 48, 34.0, 18.0, 7.0);
    let pair = vec![
        MaskProposal { id: 1, mask: cat.clone() },
        MaskProposal { id: 2, mask: dog.clone() },
        MaskProposal { id: 3, mask: union(&cat, &dog) },
    ];
    vec![
        ("simple-ball".into(), ball, 1, "the ball".into()),
        ("simple-pair".into(), pair, 2, "the dog on the right".into()),
    ]
}

fn record(id: &str, width: usize, height: usize, expression: &str, gt: &BinaryMask, tags: &[&str]) -> EvalRecord {
    EvalRecord {
        sample_id: id.into(),
        image: ImageMeta {
            width,
            height,
            path: None,
            id: None,
        },
        expression: expression.into(),
        proposals: PathBuf::from("proposals").join(format!("{id}.json")),
        gt: Rle::encode(gt),
        split_tags: tags.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub scenes: PathBuf,
    pub selfcorrect: PathBuf,
    pub simple: PathBuf,
    pub attention_dump: PathBuf,
    pub gradients_dump: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every fixture under `dir`.
pub fn write_fixtures(dir: &Path) -> Result<FixturePaths> {
    let prop_dir = dir.join("proposals");
    let dump_dir = dir.join("dumps");
    for d in [dir, prop_dir.as_path(), dump_dir.as_path()] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let paths = FixturePaths {
        dir: dir.to_path_buf(),
        scenes: dir.join("scenes.json"),
        selfcorrect: dir.join("selfcorrect.jsonl"),
        simple: dir.join("simple.jsonl"),
        attention_dump: dump_dir.join("selfcorrect_attention.irpe"),
        gradients_dump: dump_dir.join("selfcorrect_gradients.irpe"),
    };
    let library = scene_library();
    library.save(&paths.scenes)?;

    let sc_props = selfcorrect_proposals();
    write(&prop_dir.join(format!("{SELFCORRECT_ID}.json")), &(proposals_to_json(&sc_props)? + "\n"))?;
    let gt = &sc_props[(SELFCORRECT_TARGET - 1) as usize].mask;
    let sc_record = record(SELFCORRECT_ID, 64, 32, SELFCORRECT_EXPRESSION, gt, &["fixture"]);
    write(&paths.selfcorrect, &Dataset::to_jsonl(&[sc_record])?)?;

    let mut simple = Vec::new();
    for (id, props, target, expr) in simple_proposals() {
        write(&prop_dir.join(format!("{id}.json")), &(proposals_to_json(&props)? + "\n"))?;
        let gt = props
            .iter()
            .find(|p| p.id == target)
            .map(|p| p.mask.clone())
            .expect("target proposal exists");
        simple.push(record(&id, 48, 48, &expr, &gt, &["fixture"]));
    }
    write(&paths.simple, &Dataset::to_jsonl(&simple)?)?;

    // first-pass backend tensors of the self-correction sample
    let mut backend = SyntheticBackend::new(library.scenes)?;
    let parsed = Parser::default().parse(SELFCORRECT_EXPRESSION)?;
    let (h, w) = backend.latent_grid(SELFCORRECT_ID)?;
    let response = backend.forward(&BackendRequest {
        image: SELFCORRECT_ID.into(),
        tokens: request_tokens(&parsed),
        mask: BinaryMask::ones(h, w),
        mask_mode: MaskMode::Feature,
    })?;
    dump::write(&paths.attention_dump, &response.attention)?;
    dump::write(&paths.gradients_dump, &response.gradients)?;
    Ok(paths)
}
