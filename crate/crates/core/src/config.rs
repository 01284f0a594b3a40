//! Training configuration and its TOML form.
//!
//! Every field is optional in the file. A `profile = "paper"` key switches
//! the base values before the remaining keys are applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldrepr::Backbone;
use crate::optim::AdamConfig;
use crate::regionattn::AttentionKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Minutes on a desktop CPU.
    #[default]
    Desk,
    /// The full published schedule.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Pixel-loss iterations (default 2000).
    pub coarse_iters: usize,
    /// Patch-loss iterations (default 500).
    pub fine_iters: usize,
    /// Torso iterations (default 1500).
    pub torso_iters: usize,
    /// Rays per coarse iteration (default 512).
    pub rays_per_batch: usize,
    /// Samples per ray (default 16).
    pub samples_per_ray: usize,
    /// Learning rate of hash tables (default 0.01).
    pub lr_grid: f64,
    /// Learning rate of every other parameter (default 0.001).
    pub lr_mlp: f64,
    /// Weight of the perceptual term in the fine stage (default 0.01).
    pub lambda: f64,
    /// Side of the fine-stage patch in pixels (default 32).
    pub patch_size: u32,
    /// Patches per fine iteration (default 1).
    pub patches_per_batch: usize,
    /// Validation PSNR interval in iterations (default 500).
    pub val_every: usize,
    /// Cap on validation frames scored each time; 0 uses all (default 0).
    pub val_frames: usize,
    /// Occupancy grid side (default 32).
    pub occupancy_resolution: usize,
    /// Iterations between occupancy refreshes (default 16).
    pub occupancy_refresh: usize,
    /// Master seed (default 0).
    pub seed: u64,
    /// Head backbone (default trihash).
    pub backbone: Backbone,
    /// Region-attention variant (default channel).
    pub attention: AttentionKind,
    /// log2 of the total hash entries per level (default 14).
    pub table_size_log2: u32,
    /// Block gradients from attention into the encoder (default false).
    pub detach_attention: bool,
    /// Adam moments and decay (defaults 0.9, 0.99, 1e-8, 1e-4).
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::profile(Profile::Desk)
    }
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        let (coarse, fine, torso, rays) = match p {
            Profile::Desk => (2000, 500, 1500, 512),
            Profile::Paper => (100_000, 25_000, 100_000, 65_536),
        };
        TrainConfig {
            coarse_iters: coarse,
            fine_iters: fine,
            torso_iters: torso,
            rays_per_batch: rays,
            samples_per_ray: 16,
            lr_grid: 0.01,
            lr_mlp: 0.001,
            lambda: 0.01,
            patch_size: 32,
            patches_per_batch: 1,
            val_every: 500,
            val_frames: 0,
            occupancy_resolution: 32,
            occupancy_refresh: 16,
            seed: 0,
            backbone: Backbone::Trihash,
            attention: AttentionKind::Channel,
            table_size_log2: 14,
            detach_attention: false,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.rays_per_batch == 0 || self.samples_per_ray == 0 || self.patches_per_batch == 0 {
            return fail("rays_per_batch, samples_per_ray and patches_per_batch must be positive");
        }
        if self.val_every == 0 || self.occupancy_refresh == 0 {
            return fail("val_every and occupancy_refresh must be positive");
        }
        if self.patch_size < 3 {
            return fail("patch_size must be at least 3");
        }
        if !(1..=256).contains(&self.occupancy_resolution) {
            return fail("occupancy_resolution must be in 1..=256");
        }
        if !(4..=24).contains(&self.table_size_log2) {
            return fail("table_size_log2 must be in 4..=24");
        }
        for (name, v) in [("lr_grid", self.lr_grid), ("lr_mlp", self.lr_mlp)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be non-negative");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(a.eps > 0.0 && a.weight_decay >= 0.0 && a.weight_decay.is_finite()) {
            return fail("adam eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    /// Parses TOML. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match table.remove("profile") {
            None => Profile::Desk,
            Some(v) => v.try_into().map_err(|e: toml::de::Error| Error::Config(format!("profile: {e}")))?,
        };
        let mut base = toml::Table::try_from(TrainConfig::profile(profile)).expect("config serializes");
        for (k, v) in table {
            if k == "adam" {
                if let (Some(toml::Value::Table(dst)), toml::Value::Table(src)) = (base.get_mut("adam"), &v) {
                    for (ak, av) in src {
                        dst.insert(ak.clone(), av.clone());
                    }
                    continue;
                }
            }
            base.insert(k, v);
        }
        let cfg: TrainConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = TrainConfig::from_toml("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.coarse_iters, c.fine_iters), (2000, 500));
        assert_eq!((c.lr_grid, c.lr_mlp), (0.01, 0.001));
    }

    #[test]
    fn paper_profile_with_override() {
        let c = TrainConfig::from_toml("profile = \"paper\"\nfine_iters = 7\n[adam]\nbeta2 = 0.999\n").unwrap();
        assert_eq!((c.coarse_iters, c.fine_iters), (100_000, 7));
        assert_eq!(c.adam.beta2, 0.999);
        assert_eq!(c.adam.beta1, 0.9);
    }

    #[test]
    fn enums_parse_by_name() {
        let c = TrainConfig::from_toml("backbone = \"hash3d\"\nattention = \"concat\"").unwrap();
        assert_eq!(c.backbone, Backbone::Hash3d);
        assert_eq!(c.attention, AttentionKind::Concat);
    }

    #[test]
    fn bad_files_are_rejected() {
        for bad in ["colour = 1", "rays_per_batch = 0", "lr_grid = -1.0", "profile = \"huge\"", "[adam]\nmomentum = 1", "x ="] {
            assert!(matches!(TrainConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = TrainConfig::default();
        c.seed = 7;
        c.lambda = 0.25;
        let text = toml::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
    }
}
