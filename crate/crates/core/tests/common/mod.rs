#![allow(dead_code)]

use std::sync::OnceLock;

use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig, TrainReport};
use attnlrp::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use attnlrp::Tensor;

pub struct Trained {
    pub task: Task,
    pub model: Model,
    pub report: TrainReport,
}

fn train(task: Task, config: attnlrp::model::ModelConfig, seed: u64) -> Trained {
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (model, report) = train_toy(config, &task, &tc).expect("training succeeds");
    Trained { task, model, report }
}

/// Default planted-answer decoder: 4 layers, d_model 64, 4 heads, gated SiLU.
pub fn decoder() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = Task::planted_answer();
        let config = task.default_model();
        train(task, config, 0)
    })
}

/// The same decoder with a 2-expert, top-1 mixture in every FFN.
pub fn moe_decoder() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = Task::planted_answer();
        let config = task.default_model().with_moe(2, 1);
        train(task, config, 0)
    })
}

pub fn encoder() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = Task::majority_class();
        let config = task.default_model();
        train(task, config, 0)
    })
}

pub fn vit() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = Task::patch_shape();
        let config = task.default_model();
        train(task, config, 0)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}
