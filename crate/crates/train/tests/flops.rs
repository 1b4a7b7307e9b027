use repq::batchnorm::StatsMethod;
use repq_train::flops::{conv_stats_cost, flops_report};
use repq_train::ExperimentConfig;

fn config(topology: &str, widths: &str, pools: &str, batch: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
model = "minivgg"
widths = {widths}
pools = {pools}
topology = ["{topology}"]
bits = 4
seeds = [0]
output_dir = "unused"
[dataset]
kind = "synthetic"
train_size = 64
eval_size = 8
[strategy]
name = "repq"
bn_mode = "exact_fold"
[strategy.fp]
epochs = 1
batch_size = {batch}
[strategy.qat]
epochs = 1
"#
    ))
    .unwrap()
}

/// Taps of a 3x3 same-padded kernel that land inside an `h x w` map,
/// summed over output positions.
fn active_taps(h: u64, w: u64) -> u64 {
    (3 * h - 2) * (3 * w - 2)
}

fn exact_stats(b: u64, h: u64, w: u64, cin: u64, cout: u64) -> u64 {
    let n = b * h * w;
    b * active_taps(h, w) * cin * cout + cout + (n * cout + 2 * cout)
}

fn estimate_stats(b: u64, h: u64, w: u64, cin: u64, cout: u64) -> u64 {
    let n = b * h * w;
    n * cin + 3 * cin + 9 * cin * cout + 2 * cin * cout
}

#[test]
fn per_layer_stats_follow_the_two_cost_formulas() {
    let cfg = config("conv_bn", "[4, 6, 8]", "[0]", 8);
    let report = flops_report(&cfg).unwrap();
    let b = 8u64;
    let mut hw = 16u64;
    let mut cin = 1u64;
    for (i, l) in report.layers.iter().enumerate() {
        let cout = cfg.widths[i] as u64;
        assert_eq!((l.in_channels as u64, l.out_channels as u64), (cin, cout));
        assert_eq!(l.exact.stats, exact_stats(b, hw, hw, cin, cout), "layer {i}");
        assert_eq!(l.estimate.stats, estimate_stats(b, hw, hw, cin, cout), "layer {i}");
        // the final quantization-free convolution is the same either way
        assert_eq!(l.exact.compute, l.estimate.compute);
        if cfg.pools.contains(&i) {
            hw /= 2;
        }
        cin = cout;
    }
    assert!(report.totals_consistent());
    assert_eq!(report.exact_rest.stats, 0);
    assert_eq!(report.estimate_rest.stats, 0);
    let layer_sum: u64 = report.layers.iter().map(|l| l.exact.stats).sum();
    assert_eq!(layer_sum, report.exact_total.stats);
}

#[test]
fn one_by_one_layer_ratio_is_near_one_over_out() {
    let (b, h, w, cin, cout) = (4, 8, 8, 16, 64);
    let est = conv_stats_cost(b, h, w, cin, cout, 1, StatsMethod::Estimate).unwrap();
    let exact = conv_stats_cost(b, h, w, cin, cout, 1, StatsMethod::Exact).unwrap();
    let n = (b * h * w) as u64;
    let (cin, cout) = (cin as u64, cout as u64);
    assert_eq!(est, n * cin + 3 * cin + cin * cout + 2 * cin * cout);
    assert_eq!(exact, n * cin * cout + cout + n * cout + 2 * cout);
    let ratio = est as f64 / exact as f64;
    assert!(ratio <= 1.0 / 32.0, "{ratio}");
    // 1/OUT plus the kernel terms
    let oracle = 1.0 / cout as f64 + (3 * cin + 3 * cin * cout) as f64 / exact as f64;
    assert!((ratio - oracle).abs() < 0.01, "{ratio} vs {oracle}");
}

#[test]
fn single_output_channel_gives_no_advantage() {
    let est = conv_stats_cost(4, 8, 8, 16, 1, 1, StatsMethod::Estimate).unwrap();
    let exact = conv_stats_cost(4, 8, 8, 16, 1, 1, StatsMethod::Exact).unwrap();
    let ratio = est as f64 / exact as f64;
    assert!((0.9..=1.1).contains(&ratio), "{ratio}");
}

#[test]
fn estimate_cost_does_not_scale_with_out_beyond_weight_terms() {
    let (b, h, cin) = (4, 8, 8);
    let e1 = conv_stats_cost(b, h, h, cin, 16, 3, StatsMethod::Estimate).unwrap();
    let e2 = conv_stats_cost(b, h, h, cin, 32, 3, StatsMethod::Estimate).unwrap();
    assert_eq!(e2 - e1, (9 * cin * 16 + 2 * cin * 16) as u64);
    let c1 = conv_stats_cost(b, h, h, cin, 16, 3, StatsMethod::Exact).unwrap();
    let c2 = conv_stats_cost(b, h, h, cin, 32, 3, StatsMethod::Exact).unwrap();
    assert!(c2 - c1 > (b * h * h * cin * 16) as u64);
}

#[test]
fn minivgg_step_is_cheaper_with_estimation() {
    let cfg = config("repvgg", "[16, 32, 64, 64]", "[1, 2]", 32);
    let report = flops_report(&cfg).unwrap();
    assert!(report.totals_consistent());
    assert!(report.estimate_total.stats < report.exact_total.stats);
    assert!(report.estimate_total.total() < report.exact_total.total());
    assert!(report.step_ratio() < 1.0 && report.stats_ratio() < 0.2);
    let text = report.to_text();
    assert!(text.contains("step total"));
    assert_eq!(text.lines().filter(|l| l.starts_with("total")).count(), 1);
}
