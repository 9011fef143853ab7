//! Fixtures shared by the criterion benches: a planted synthetic dataset at a chosen
//! grid size, with a model and prepared clips built from the default run configuration.

use dsg_core::downstream::DsgModel;
use dsg_core::graph::Grid;
use dsg_core::io::{generate_synthetic, ClipDataset, RunConfig, Split, SyntheticSpec};
use dsg_core::pipeline::{build_model, prepare_records, records};
use dsg_core::training::PreparedClip;

pub struct Fixture {
    pub dataset: ClipDataset,
    pub config: RunConfig,
    pub model: DsgModel,
    pub clips: Vec<PreparedClip>,
}

/// `clips` planted training clips on a `side × side` grid with `window` frames each.
pub fn planted(side: usize, window: usize, clips: usize) -> Fixture {
    let spec = SyntheticSpec { grid: Grid::new(side, side), window, train: clips, val: 0, test: 0, ..SyntheticSpec::default() };
    let dataset = generate_synthetic(&spec).expect("synthetic spec is valid");
    let config = RunConfig { k: 4, ..RunConfig::default() };
    let model = build_model(&dataset, &config).expect("default config builds");
    let clips = prepare_records(&records(&dataset, Split::Train), &dataset, &config, &model).expect("clips prepare");
    Fixture { dataset, config, model, clips }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        let f = planted(4, 2, 3);
        assert_eq!(f.clips.len(), 3);
        assert_eq!(f.clips[0].inputs.nodes(), 2 * 16);
    }
}
