#![allow(dead_code)]

use task_affinity::nnet::{Activation, NetworkSpec, TrainSchedule};
use task_affinity::pipeline::PipelineConfig;
use task_affinity::rng::{derive_seed, stream};
use task_affinity::tasks::{family_split, make_synthetic, Dataset, SyntheticConfig};

pub fn schedule(learning_rate: f64, epochs: usize, batch_size: usize) -> TrainSchedule {
    TrainSchedule {
        learning_rate,
        momentum: 0.9,
        epochs,
        batch_size,
        lr_decay_epochs: Vec::new(),
        lr_decay_factor: 1.0,
        seed: 0,
    }
}

/// One synthetic family benchmark: data, split and settings.
#[derive(Debug, Clone)]
pub struct Bench {
    pub synth: SyntheticConfig,
    pub test_family: usize,
    pub train_per_family: usize,
    pub network: NetworkSpec,
    pub pipeline: PipelineConfig,
}

impl Bench {
    /// Reseeds data and pipeline from one master seed.
    pub fn seeded(mut self, master: u64) -> Self {
        self.synth.seed = derive_seed(master, stream::SYNTH);
        self.pipeline.reseed(master);
        self
    }

    pub fn data(&self) -> (Dataset, Dataset) {
        let data = make_synthetic(&self.synth).unwrap();
        family_split(&data, &self.synth, self.test_family, self.train_per_family).unwrap()
    }
}

fn synth(classes_per_family: usize) -> SyntheticConfig {
    SyntheticConfig {
        n_families: 4,
        classes_per_family,
        samples_per_class: 40,
        input_dim: 32,
        family_spread: 8.0,
        class_spread: 2.0,
        noise_sigma: 0.5,
        seed: 0,
        class_subspace_dim: Some(3),
    }
}

/// 4 families of 6 classes; 3 per family train, the other 3 of family 0 test.
pub fn small_bench() -> Bench {
    Bench {
        synth: synth(6),
        test_family: 0,
        train_per_family: 3,
        network: NetworkSpec::new(vec![32, 32, 8], 12, Activation::Tanh).unwrap(),
        pipeline: PipelineConfig {
            s_count: 20,
            n_test: 3,
            top_r: 3,
            m_way: 3,
            k_shot: 1,
            q_query: 10,
            epsilon: 0.2,
            whole_schedule: schedule(0.05, 5, 32),
            approx_schedule: schedule(0.05, 10, 16),
            finetune_schedule: schedule(0.01, 10, 4),
            n_eval_episodes: 300,
            softmax_temperature: 1.0,
            master_seed: 0,
            finetune_batches_per_epoch: 20,
            target_shots: 20,
            hist_bins: 20,
        },
    }
    .seeded(0)
}

/// 4 families of 25 classes; 20 per family train, the other 5 of family 0
/// test; 200 source tasks.
pub fn ablation_bench() -> Bench {
    Bench {
        synth: synth(25),
        test_family: 0,
        train_per_family: 20,
        network: NetworkSpec::new(vec![32, 32, 8], 80, Activation::Tanh).unwrap(),
        pipeline: PipelineConfig {
            s_count: 200,
            n_test: 5,
            top_r: 5,
            m_way: 5,
            k_shot: 1,
            q_query: 10,
            epsilon: 0.2,
            whole_schedule: schedule(0.05, 5, 32),
            approx_schedule: schedule(0.05, 10, 16),
            finetune_schedule: schedule(0.02, 50, 4),
            n_eval_episodes: 300,
            softmax_temperature: 1.0,
            master_seed: 0,
            finetune_batches_per_epoch: 20,
            target_shots: 20,
            hist_bins: 20,
        },
    }
    .seeded(0)
}
