//! Helpers for the acceptance suite: shipped configurations, calibrated plans
//! and a small verdict log.

use std::path::{Path, PathBuf};
use std::time::Instant;
use twostage_cli::config::Config;
use twostage_core::optimiser::{calibrate, DecisionRule, Problem};

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load(name: &str) -> Config {
    Config::from_path(&config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// A shipped configuration with textual edits applied.
pub fn load_edited(name: &str, edits: &[(&str, &str)]) -> Config {
    let mut text = std::fs::read_to_string(config_path(name)).unwrap();
    for (from, to) in edits {
        assert!(text.contains(from), "{name}: `{from}` not found");
        text = text.replacen(from, to, 1);
    }
    Config::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Build and calibrate the plan described by a configuration.
pub fn plan(cfg: &Config) -> (Problem, DecisionRule) {
    let problem = Problem::new(cfg.design().unwrap(), &cfg.grid().unwrap(), &cfg.planning_model().unwrap()).unwrap();
    let rule = calibrate(&problem, &cfg.calibration().unwrap()).unwrap();
    (problem, rule)
}

pub fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

pub fn within_rel(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target.abs()
}

/// Indices of points not weakly dominated by any other point, by pairwise comparison.
pub fn brute_force_front(points: &[Vec<f64>]) -> Vec<usize> {
    let dominated = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y);
    (0..points.len()).filter(|&i| !(0..points.len()).any(|j| dominated(&points[j], &points[i]))).collect()
}

#[derive(Debug)]
pub struct Verdict {
    pub id: usize,
    pub title: String,
    pub pass: bool,
    pub lines: Vec<String>,
    pub seconds: f64,
}

/// Collects findings for one criterion.
pub struct Check {
    id: usize,
    title: String,
    pass: bool,
    lines: Vec<String>,
    start: Instant,
}

impl Check {
    pub fn new(id: usize, title: &str) -> Self {
        Self { id, title: title.into(), pass: true, lines: Vec::new(), start: Instant::now() }
    }

    /// Record a requirement and its measured value.
    pub fn require(&mut self, ok: bool, what: impl Into<String>) {
        self.pass &= ok;
        self.lines.push(format!("[{}] {}", if ok { "ok" } else { "MISS" }, what.into()));
    }

    pub fn note(&mut self, what: impl Into<String>) {
        self.lines.push(format!("     {}", what.into()));
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn finish(self) -> Verdict {
        let seconds = self.elapsed();
        Verdict { id: self.id, title: self.title, pass: self.pass, lines: self.lines, seconds }
    }
}

impl Verdict {
    pub fn print(&self) {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {:>2}: {} ({:.1} s)", self.id, self.title, self.seconds);
        for l in &self.lines {
            println!("        {l}");
        }
    }
}
