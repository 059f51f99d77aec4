mod common;

use nbgam::data::{load_panel, LoadOptions};
use nbgam::diagnostics::temporal_acf;
use nbgam::fitter::{select_smoothing, FitOptions};
use nbgam::model_dsl::parse_formula;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{county_panel, write_panel_file};

#[test]
fn file_row_order_does_not_change_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let sorted = dir.path().join("sorted.csv");
    write_panel_file(&county_panel(30, 10, 5), &sorted);

    let text = std::fs::read_to_string(&sorted).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    lines.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let shuffled = dir.path().join("shuffled.csv");
    std::fs::write(&shuffled, format!("{header}\n{}\n", lines.join("\n"))).unwrap();

    let spec = parse_formula("deaths ~ s(median_age) + ICEraceinc").unwrap();
    let fit = |path| {
        let (panel, _) = load_panel(path, &LoadOptions::default()).unwrap();
        select_smoothing(&spec, &panel, &FitOptions::default()).unwrap()
    };
    let (a, b) = (fit(&sorted), fit(&shuffled));
    assert_eq!(a.coefficients, b.coefficients);
    assert_eq!(a.log_lambdas, b.log_lambdas);
    assert_eq!(a.phi, b.phi);
}

#[test]
fn acf_report_from_loaded_panel() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    write_panel_file(&county_panel(25, 14, 11), &path);
    let (panel, _) = load_panel(&path, &LoadOptions::default()).unwrap();
    let report = temporal_acf(&panel, "crude_rate", 5).unwrap();
    assert_eq!(report.summaries.len(), 5);
    assert!(report.excluded_units.is_empty());
    for (k, summary) in report.summaries.iter().enumerate() {
        assert_eq!(summary.lag, k + 1);
        assert_eq!(summary.per_unit_acf.len(), 25);
        let q = &summary.weighted_quantiles;
        assert!(q.windows(2).all(|w| w[0].level < w[1].level && w[0].value <= w[1].value));
        assert!(q.iter().all(|p| (-1.0..=1.0).contains(&p.value)));
    }
}
