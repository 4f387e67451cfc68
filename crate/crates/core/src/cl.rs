//! Class-incremental training over a cumulative chunk stream, expanding the
//! core block at the start of every chunk after the first.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::budget::{solve_method_dims, GrowthSchedule};
use crate::data::{cumulative_batch, gen_synthetic_chunks, load_dataset, ChunkedDataset, DataConfig, StreamCursor};
use crate::error::{Error, Result};
use crate::expansion::{apply_expansion, build_core, ExpansionMethod};
use crate::nn::{count_params, cross_entropy, BaseModel, BaseModelConfig};
use crate::params::{AdamConfig, ParamStore};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClConfig {
    /// Load the stream from this directory instead of generating `data`.
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
    pub model: BaseModelConfig,
    pub method: ExpansionMethod,
    pub budget: usize,
    pub steps_per_chunk: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Record real elapsed time in `wall_ms`; off by default so logs are
    /// byte-reproducible.
    pub wall_clock: bool,
}

impl Default for ClConfig {
    fn default() -> Self {
        ClConfig {
            dataset: None,
            data: DataConfig::default(),
            model: BaseModelConfig::default(),
            method: ExpansionMethod::DynamicMoe { granularity: 2 },
            budget: 20480,
            steps_per_chunk: 2000,
            batch_size: 64,
            eval_every: 200,
            eval_size: 2048,
            adam: AdamConfig::default(),
            seed: 0,
            wall_clock: false,
        }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_chunk == 0 || self.batch_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("steps_per_chunk, batch_size and eval_size must be positive".into()));
        }
        if self.eval_every == 0 || self.steps_per_chunk % self.eval_every != 0 {
            return Err(Error::Config(format!(
                "eval_every {} must divide steps_per_chunk {}",
                self.eval_every, self.steps_per_chunk
            )));
        }
        self.model.validate()
    }

    pub fn load_data(&self) -> Result<ChunkedDataset> {
        match &self.dataset {
            Some(dir) => load_dataset(dir),
            None => gen_synthetic_chunks(&self.data),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClRow {
    pub global_step: u64,
    pub chunk: usize,
    pub train_accuracy: f64,
    pub loss: f64,
    pub active_params: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<ClRow>,
}

impl RunLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        if self.rows.is_empty() {
            out.write_record(["global_step", "chunk", "train_accuracy", "loss", "active_params", "wall_ms"])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Rows logged while training `chunk`.
    pub fn rows_in_chunk(&self, chunk: usize) -> impl Iterator<Item = &ClRow> {
        self.rows.iter().filter(move |r| r.chunk == chunk)
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn eval_train_accuracy(model: &BaseModel, store: &ParamStore, images: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(accuracy_from_logits(&model.logits(store, images, EVAL_BATCH)?, labels))
}

fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = cross_entropy(&mut g, l, labels)?;
    Ok(g.value(loss).item())
}

/// Step-wise driver for one run; [`run_cl`] loops it to completion.
pub struct ClTrainer {
    pub config: ClConfig,
    pub data: ChunkedDataset,
    pub schedule: GrowthSchedule,
    pub store: ParamStore,
    pub model: BaseModel,
    cursor: StreamCursor,
    step_in_chunk: usize,
    eval_set: (Tensor, Vec<usize>),
    log: RunLog,
    started: Instant,
}

impl ClTrainer {
    pub fn new(config: ClConfig, data: ChunkedDataset) -> Result<Self> {
        config.validate()?;
        let [c, h, w] = data.image_shape;
        if c != config.model.in_channels || h != config.model.image_size || w != config.model.image_size {
            return Err(Error::Config(format!(
                "dataset images are {:?}, model expects [{}, {}, {}]",
                data.image_shape, config.model.in_channels, config.model.image_size, config.model.image_size
            )));
        }
        if data.num_classes != config.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {}",
                data.num_classes, config.model.num_classes
            )));
        }
        let schedule = solve_method_dims(config.method, config.model.width, config.budget, data.chunks.len())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = BaseModel::new(
            &mut store,
            config.model.clone(),
            |s, r| build_core(&schedule, s, "core", true, r),
            &mut rng,
        )?;
        let cursor = StreamCursor::new(config.seed ^ 0x5eed_0da7a);
        let mut t = ClTrainer {
            config,
            data,
            schedule,
            store,
            model,
            cursor,
            step_in_chunk: 0,
            eval_set: (Tensor::zeros(&[0]), Vec::new()),
            log: RunLog::default(),
            started: Instant::now(),
        };
        t.eval_set = t.draw_eval_set();
        Ok(t)
    }

    fn draw_eval_set(&self) -> (Tensor, Vec<usize>) {
        let total = self.data.cumulative_len(self.cursor.index);
        let k = self.config.eval_size.min(total);
        let seed = self.config.seed.wrapping_mul(1_000_003).wrapping_add(self.cursor.index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, total, k).into_vec();
        idx.sort_unstable();
        self.data.gather(&idx)
    }

    pub fn chunk(&self) -> usize {
        self.cursor.index
    }

    pub fn global_step(&self) -> u64 {
        (self.cursor.index * self.config.steps_per_chunk + self.step_in_chunk) as u64
    }

    pub fn active_params(&self) -> usize {
        count_params(&self.model.core, &self.store, false, false)
    }

    pub fn eval_set(&self) -> &(Tensor, Vec<usize>) {
        &self.eval_set
    }

    /// Accuracy and mean cross-entropy on the given samples.
    pub fn evaluate_on(&self, images: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
        let logits = self.model.logits(&self.store, images, EVAL_BATCH)?;
        Ok((accuracy_from_logits(&logits, labels), mean_cross_entropy(&logits, labels)?))
    }

    pub fn evaluate(&self) -> Result<(f64, f64)> {
        self.evaluate_on(&self.eval_set.0, &self.eval_set.1)
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let (images, labels) = cumulative_batch(&self.data, &mut self.cursor, self.config.batch_size);
        let mut g = Graph::new();
        let x = g.constant(images);
        let logits = self.model.forward(&mut g, &self.store, x)?;
        let loss = cross_entropy(&mut g, logits, &labels)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        self.store.accumulate(&grads);
        self.config.adam.step(&mut self.store)?;
        self.step_in_chunk += 1;
        Ok(value)
    }

    /// Moves to the next chunk and applies that stage's expansion.
    pub fn expand(&mut self) -> Result<usize> {
        if self.step_in_chunk != self.config.steps_per_chunk {
            return Err(Error::Expansion("expansion only at chunk boundaries".into()));
        }
        self.cursor.advance(&self.data)?;
        self.step_in_chunk = 0;
        let stage = self.cursor.index;
        let seed = self.config.seed.wrapping_mul(7919).wrapping_add(stage as u64);
        let n = apply_expansion(&self.schedule, &mut self.model.core, &mut self.store, stage, seed)?;
        self.eval_set = self.draw_eval_set();
        Ok(n)
    }

    fn log_row(&mut self) -> Result<()> {
        let (train_accuracy, loss) = self.evaluate()?;
        let wall_ms = if self.config.wall_clock { self.started.elapsed().as_millis() as u64 } else { 0 };
        self.log.rows.push(ClRow {
            global_step: self.global_step(),
            chunk: self.cursor.index,
            train_accuracy,
            loss,
            active_params: self.active_params(),
            wall_ms,
        });
        Ok(())
    }

    /// Trains the current chunk to its end, logging every `eval_every` steps.
    pub fn train_chunk(&mut self) -> Result<()> {
        while self.step_in_chunk < self.config.steps_per_chunk {
            if self.step_in_chunk % self.config.eval_every == 0 {
                self.log_row()?;
            }
            self.train_step()?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<RunLog> {
        let chunks = self.data.chunks.len();
        for c in 0..chunks {
            if c > 0 {
                self.expand()?;
            }
            self.train_chunk()?;
        }
        self.log_row()?;
        Ok(self.log)
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }
}

pub fn run_cl(config: &ClConfig) -> Result<RunLog> {
    let data = config.load_data()?;
    ClTrainer::new(config.clone(), data)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(method: ExpansionMethod) -> ClConfig {
        ClConfig {
            data: DataConfig {
                num_chunks: 3,
                classes_per_chunk: 2,
                samples_per_class: 8,
                channels: 1,
                height: 4,
                width: 4,
                noise_sigma: 0.1,
                seed: 1,
            },
            model: BaseModelConfig {
                in_channels: 1,
                image_size: 4,
                conv_widths: vec![2],
                kernel: 3,
                width: 8,
                num_classes: 6,
            },
            method,
            budget: 192,
            steps_per_chunk: 4,
            batch_size: 8,
            eval_every: 2,
            eval_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn ties_break_low() {
        let l = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&l), vec![0, 1]);
        let flat = Tensor::zeros(&[4, 3]);
        assert_eq!(accuracy_from_logits(&flat, &[0, 1, 0, 2]), 0.5);
        let perfect = Tensor::from_rows(&[vec![0.0, 5.0], vec![5.0, 0.0]]).unwrap();
        assert_eq!(accuracy_from_logits(&perfect, &[1, 0]), 1.0);
    }

    #[test]
    fn log_grid_and_growth_timing() {
        let log = run_cl(&tiny(ExpansionMethod::DynamicMoe { granularity: 2 })).unwrap();
        let steps: Vec<u64> = log.rows.iter().map(|r| r.global_step).collect();
        assert_eq!(steps, vec![0, 2, 4, 6, 8, 10, 12]);
        let counts: Vec<usize> = log.rows.iter().map(|r| r.active_params).collect();
        assert_eq!(counts, vec![64, 64, 128, 128, 192, 192, 192]);
        assert_eq!(log.rows.last().unwrap().chunk, 2);
    }

    #[test]
    fn none_keeps_params_constant() {
        let log = run_cl(&tiny(ExpansionMethod::None)).unwrap();
        assert!(log.rows.iter().all(|r| r.active_params == 192));
    }

    #[test]
    fn same_seed_same_log() {
        let c = tiny(ExpansionMethod::Net2wider);
        let a = run_cl(&c).unwrap();
        let b = run_cl(&c).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().starts_with("global_step,chunk,train_accuracy,loss,active_params,wall_ms\n"));
    }

    #[test]
    fn eval_every_must_divide() {
        let mut c = tiny(ExpansionMethod::None);
        c.eval_every = 3;
        assert!(matches!(run_cl(&c), Err(Error::Config(_))));
    }
}
