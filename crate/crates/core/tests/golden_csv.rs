//! Golden-file check: the CSV column set, order, and value formatting are a
//! stable contract. If this test breaks, either restore the output or treat
//! the change as a deliberate schema revision and update the expectation.

use fedamd::harness::{parse_config, run_experiment_with_threads, to_csv};

const CONFIG: &str = r#"
algorithm = "fedamd"

[dataset]
kind = "quadratic"
d = 2
mu_min = 0.5
l_max = 1.5
center_scale = 1.0
samples_per_client = 2

[model]
kind = "quadratic"

[federation]
M = 3
A = 2
K = 2
b = "full"
b_small = 2

[schedule]
kind = "sequential"
tau = 2

[lrs]
eta_l = 0.1
eta_s = 1.0

[run]
rounds = 4
seed = 11
"#;

const GOLDEN: &str = "\
round,p_t,anchors,miners,train_loss,grad_norm_sq,test_acc,cum_grad_samples,cum_comm_floats
0,NaN,0,0,1.6917444204150442,0.2877162703872379,NaN,6,0
1,1,2,0,1.6917444204150442,0.2877162703872379,NaN,10,8
2,0,0,2,1.6456977349204298,0.15219619152067299,NaN,22,20
3,1,2,0,1.6456977349204298,0.15219619152067299,NaN,26,28
4,0,0,2,1.6189322838406772,0.0736297792023285,NaN,38,40
";

#[test]
fn csv_output_matches_golden_bytes() {
    let cfg = parse_config(CONFIG).unwrap();
    let artifact = run_experiment_with_threads(&cfg, 1).unwrap();
    assert_eq!(to_csv(&artifact), GOLDEN);
}
