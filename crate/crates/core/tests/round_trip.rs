use ernf::checkpoint::Checkpoint;
use ernf::nets::{GateOverride, HeadField, HeadFieldConfig, TorsoField, TorsoFieldConfig};
use ernf::render::{render_frame, ConditionedHead, RenderOptions};
use ernf::scene::{self, GenerateOptions, Split, SyntheticScene, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn small_options(seed: u64) -> GenerateOptions {
    GenerateOptions {
        frames: 5,
        size: 20,
        focal: 25.0,
        seed,
        trajectory: Trajectory::default(),
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "frames", "head"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn dataset_generation_is_reproducible() {
    let scene = SyntheticScene::standard(4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    scene::generate_dataset(&scene, &small_options(4), a.path()).unwrap();
    scene::generate_dataset(&scene, &small_options(4), b.path()).unwrap();
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    assert_eq!(fa.len(), 1 + 2 * 5);
    assert_eq!(fa, fb);
}

#[test]
fn dataset_loads_what_was_written() {
    let scene = SyntheticScene::standard(1);
    let dir = tempfile::tempdir().unwrap();
    let m = scene::generate_dataset(&scene, &small_options(1), dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert_eq!(scene::parse_manifest(&text).unwrap(), m);

    let ds = scene::load_dataset(dir.path()).unwrap();
    assert_eq!(ds.frames.len(), 5);
    assert!(ds.frames.iter().any(|f| f.split == Split::Val));
    for f in &ds.frames {
        assert_eq!((f.image.width, f.image.height), (20, 20));
        let disk = ernf::ppm::read(&dir.path().join("frames").join(format!("{:04}.ppm", f.index))).unwrap();
        assert_eq!(disk, f.image);
    }
}

#[test]
fn checkpoint_file_preserves_renders() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scene = SyntheticScene::standard(2);
    let dir = tempfile::tempdir().unwrap();
    scene::generate_dataset(&scene, &small_options(2), dir.path()).unwrap();
    let ds = scene::load_dataset(dir.path()).unwrap();

    let ckpt = Checkpoint {
        aabb: ds.aabb,
        head: Some(HeadField::new(&HeadFieldConfig::default(), &mut rng).unwrap()),
        occupancy: None,
        torso: Some(TorsoField::new(&TorsoFieldConfig::default(), &mut rng).unwrap()),
    }
    .quantized();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);

    let f = &ds.frames[0];
    let mut opts = RenderOptions::new(ds.aabb);
    opts.samples = 8;
    let render = |c: &Checkpoint| {
        let h = ConditionedHead {
            field: c.head.as_ref().unwrap(),
            condition: f.condition,
            gates: GateOverride::None,
        };
        render_frame(&h, &ds.intrinsics, &f.view(), &opts).unwrap()
    };
    assert_eq!(render(&back), render(&ckpt));
}
