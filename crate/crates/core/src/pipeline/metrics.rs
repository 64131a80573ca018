use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::Stage;
use crate::config::RunConfig;
use crate::error::Result;
use crate::worldmodel::UpdateMetrics;

pub const METRICS_HEADER: &str = "stage,step,trial,consistency_loss,reward_loss,q_loss,v_loss,awr_loss,total_loss,\
mean_q,q_uncertainty,grad_norm,episode_return,success,plan_uncertainty_mean,plan_uncertainty_max";

pub const TIMING_HEADER: &str = "stage,step,trial,wall_seconds";

/// Episode outcome columns of a metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeColumns {
    pub episode_return: f64,
    pub success: bool,
    pub uncertainty_mean: f64,
    pub uncertainty_max: f64,
}

/// One metrics line. Update rows carry losses; trial rows carry the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow<'a> {
    pub stage: Stage,
    pub step: u64,
    pub trial: Option<usize>,
    pub update: Option<&'a UpdateMetrics>,
    pub episode: Option<EpisodeColumns>,
}

impl MetricsRow<'_> {
    pub fn to_csv(&self) -> String {
        let mut line = format!("{},{},", self.stage.as_str(), self.step);
        if let Some(t) = self.trial {
            write!(line, "{t}").unwrap();
        }
        match self.update {
            Some(m) => {
                let p = &m.parts;
                for v in [p.consistency, p.reward, p.q, p.v, p.awr, m.total, m.mean_q, m.mean_uncertainty, m.grad_norm] {
                    write!(line, ",{v}").unwrap();
                }
            }
            None => line.push_str(",,,,,,,,,"),
        }
        match self.episode {
            Some(e) => write!(
                line,
                ",{},{},{},{}",
                e.episode_return, e.success as u8, e.uncertainty_mean, e.uncertainty_max
            )
            .unwrap(),
            None => line.push_str(",,,,"),
        }
        line
    }
}

/// Output directory of a run: canonical config echo, append-only metrics
/// CSV, a wall-clock sidecar and checkpoints.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    start: Instant,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>, cfg: &RunConfig) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        std::fs::write(root.join("config.toml"), cfg.to_canonical_toml())?;
        let metrics = open_csv(&root.join("metrics.csv"), METRICS_HEADER)?;
        let timing = open_csv(&root.join("timing.csv"), TIMING_HEADER)?;
        Ok(Self { root, metrics, timing, start: Instant::now() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, stage: Stage, step: u64) -> PathBuf {
        self.root.join(format!("{}_{step}.ckpt", stage.as_str()))
    }

    pub fn write(&mut self, row: &MetricsRow<'_>) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv())?;
        Ok(())
    }

    pub fn write_timing(&mut self, stage: Stage, step: u64, trial: Option<usize>) -> Result<()> {
        let trial = trial.map(|t| t.to_string()).unwrap_or_default();
        let secs = self.start.elapsed().as_secs_f64();
        writeln!(self.timing, "{},{step},{trial},{secs:.3}", stage.as_str())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

fn open_csv(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}
