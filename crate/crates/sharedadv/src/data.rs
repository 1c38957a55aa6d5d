//! Dataset construction from a configuration.

use sharedadv_core::data::{gen_blobs, gen_shapes_seg, Dataset, Split};
use sharedadv_core::RngStream;

use crate::config::{DataConfig, DataKind};
use crate::error::{Error, Result};
use crate::idx::load_idx_dataset;

const DATA_STREAM: u64 = 0xda7a;
const SPLIT_STREAM: u64 = 0x5b17;

pub struct Loaded {
    pub train: Dataset,
    pub test: Dataset,
    /// Target scene of the shapes task.
    pub scene: Option<Vec<usize>>,
}

/// Build the train and test splits; deterministic in `seed`.
pub fn load_data(cfg: &DataConfig, seed: u64) -> Result<Loaded> {
    let mut rng = RngStream::new(seed, DATA_STREAM);
    let (all, scene) = match cfg.kind {
        DataKind::Blobs => (gen_blobs(&mut rng, cfg.n, cfg.classes, cfg.dim, cfg.separation)?, None),
        DataKind::Shapes => {
            let s = gen_shapes_seg(&mut rng, cfg.n, cfg.side, cfg.classes, cfg.max_shapes)?;
            (s.data, Some(s.target))
        }
        DataKind::Idx => {
            let images = cfg
                .images
                .as_ref()
                .ok_or_else(|| Error::Config("idx data needs `images`".into()))?;
            // A missing image file is an I/O failure whatever else is configured.
            std::fs::metadata(images).map_err(Error::io(images))?;
            let labels = cfg
                .labels
                .as_ref()
                .ok_or_else(|| Error::Config("idx data needs `labels`".into()))?;
            let train = load_idx_dataset(images, labels, cfg.classes)?;
            if let (Some(ti), Some(tl)) = (&cfg.test_images, &cfg.test_labels) {
                let test = load_idx_dataset(ti, tl, cfg.classes)?.with_split(Split::Test);
                return Ok(Loaded {
                    train,
                    test,
                    scene: None,
                });
            }
            (train, None)
        }
    };
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
    }
    let test_len = ((all.len() as f64) * cfg.test_fraction).round() as usize;
    if test_len == 0 || test_len >= all.len() {
        return Err(Error::Config("the split leaves an empty train or test set".into()));
    }
    let (train, test) = all.split_at(all.len() - test_len, &mut RngStream::new(seed, SPLIT_STREAM));
    Ok(Loaded {
        train: train.with_split(Split::Train),
        test: test.with_split(Split::Test),
        scene,
    })
}
