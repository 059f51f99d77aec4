#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nbgam::data::{write_panel, Panel, PanelRow};
use nbgam::family::sample_nb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_nbgam"))
}

pub fn run_cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin()).args(args).current_dir(cwd).output().expect("spawn nbgam")
}

/// County-like panel with the canonical covariates. The log rate depends on
/// median age and on ICEraceinc with a time-varying slope.
pub fn county_panel(n_units: usize, n_months: usize, seed: u64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for u in 0..n_units {
        let pop: u64 = (20_000.0 * (rng.random_range(0.0..3.0f64)).exp()) as u64;
        let age: f64 = rng.random_range(30.0..50.0);
        let total_hh = (pop as f64 / 2.5).round();
        let white_hi = (total_hh * rng.random_range(0.05..0.35)).round();
        let poc_lo = (total_hh * rng.random_range(0.02..0.30)).round();
        let total_votes = (pop as f64 * 0.45).round();
        let rep = (total_votes * rng.random_range(0.2..0.8)).round();
        let dem = total_votes - rep;
        let ice = (white_hi - poc_lo) / total_hh;
        let lat: f64 = rng.random_range(25.0..49.0);
        let lon: f64 = rng.random_range(-124.0..-67.0);
        let area: f64 = rng.random_range(100.0..3000.0);
        let income: f64 = rng.random_range(30_000.0..110_000.0);
        let poverty: f64 = rng.random_range(0.05..0.3);
        for m in 0..n_months {
            let t = m as f64 / n_months.max(2) as f64;
            let eta = 4.0 + 0.04 * (age - 38.8) + (1.0 - 2.0 * t) * ice * 2.0;
            let mu = (pop as f64 / 1e5 / 12.0).ln() + eta;
            let deaths = sample_nb(mu.exp(), 8.0, &mut rng).unwrap();
            let cov = [
                ("median_age", age),
                ("median_income", income),
                ("prop_poverty", poverty),
                ("area_sqmi", area),
                ("white_hi_inc_hh", white_hi),
                ("poc_lo_inc_hh", poc_lo),
                ("total_hh", total_hh),
                ("rep_votes", rep),
                ("dem_votes", dem),
                ("total_votes", total_votes),
            ];
            rows.push(PanelRow {
                unit_id: format!("{:05}", 1001 + u),
                month_index: m as i32,
                deaths,
                popsize: pop,
                latitude: lat,
                longitude: lon,
                covariates: cov.iter().map(|(k, v)| (k.to_string(), Some(*v))).collect(),
            });
        }
    }
    Panel::from_rows(rows).unwrap()
}

pub fn write_panel_file(panel: &Panel, path: &Path) {
    let f = std::fs::File::create(path).unwrap();
    write_panel(panel, f).unwrap();
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}
