use std::fs;
use std::path::Path;
use std::process::Command;

use ippo::env::EnvConfig;
use ippo::metrics::read_curves;
use ippo::trainer::{Variant, PARAMS_FILE, STATE_FILE};
use ippo_cli::{command_figure, parse_config, parse_str, seed_dir, Overrides, CONFIG_ECHO, METRICS_DIR};

fn tiny_config(out: &Path, extra_run: &str) -> String {
    format!(
        r#"
[env]
name = "matrix_game"
horizon = 4

[algo]
n_actors = 2
steps_num = 8
mini_batch = 16
mini_epochs = 2

[run]
seeds = [0, 1, 2]
iterations = 3
eval_every = 1
eval_episodes = 4
out_dir = "{}"
{extra_run}
"#,
        out.display()
    )
}

fn ippo(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ippo")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_config_gets_defaults() {
    let cfg = parse_str("[env]\nname = \"matrix_game\"\n[run]\nseeds = [4, 5]\n").unwrap();
    assert_eq!(cfg.run.seeds, vec![4, 5]);
    let a = &cfg.algo;
    assert_eq!((a.gamma, a.lam, a.eps_clip, a.grad_norm, a.n_actors), (0.99, 0.95, 0.2, 0.5, 8));
    let echo = cfg.to_toml().unwrap();
    assert!(echo.contains("eps_clip = 0.2"), "{echo}");
    // The echo is itself a complete config that parses back to the same run.
    assert_eq!(parse_str(&echo).unwrap(), cfg);
}

#[test]
fn table_column_names_are_accepted() {
    let cfg = parse_str(
        "[algo]\nlambda_critic = 0.5\nlambda_entropy = 0.01\nhorizon = 64\ntype = \"conv1d\"\nnet_arch = [32, 32, 32]\nframes = 3\n",
    )
    .unwrap();
    assert_eq!((cfg.algo.critic_coef, cfg.algo.entropy_coef, cfg.algo.steps_num), (0.5, 0.01, 64));
}

#[test]
fn invalid_configs_name_the_key() {
    let err = format!("{:#}", parse_str("[algo]\nmini_epochs = 0\n").unwrap_err());
    assert!(err.contains("mini_epochs"), "{err}");
    let err = format!("{:#}", parse_str("[algo]\nlearning_rate_schedule = \"cosine\"\n").unwrap_err());
    assert!(err.contains("learning_rate_schedule"), "{err}");
    let err = format!("{:#}", parse_str("[run]\nlearning_rate_schedule = 1\n").unwrap_err());
    assert!(err.contains("learning_rate_schedule"), "{err}");
    let err = format!("{:#}", parse_str("[env]\nname = \"grid_stag_hunt\"\nsight_radius = 2\n").unwrap_err());
    assert!(err.contains("sight_radius"), "{err}");
    let err = format!("{:#}", parse_str("[env]\nname = \"starcraft\"\n").unwrap_err());
    assert!(err.contains("starcraft"), "{err}");
    let err = format!("{:#}", parse_str("[run]\nvariant = \"qmix\"\n").unwrap_err());
    assert!(err.contains("qmix"), "{err}");
    let err = format!("{:#}", parse_str("[run]\nseeds = []\n").unwrap_err());
    assert!(err.contains("run.seeds"), "{err}");
    let err = format!("{:#}", parse_str("[algo]\ngamma = 1.5\n").unwrap_err());
    assert!(err.contains("gamma"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        parse_config(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        n += 1;
    }
    assert_eq!(n, 3);
}

#[test]
fn missing_config_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = format!("{:#}", parse_config(&dir.path().join("absent.toml")).unwrap_err());
    assert!(err.contains("absent.toml"), "{err}");
}

#[test]
fn overrides_replace_out_dir_and_seeds() {
    let cfg = parse_str("").unwrap();
    let o = Overrides { out: Some("elsewhere".into()), seeds: Some(vec![9]) };
    let cfg = o.apply(cfg).unwrap();
    assert_eq!((cfg.run.out_dir.to_str().unwrap(), cfg.run.seeds.as_slice()), ("elsewhere", &[9][..]));
    assert!(Overrides { seeds: Some(vec![1, 1]), ..Default::default() }.apply(cfg).is_err());
}

#[test]
fn env_blocks_select_environments() {
    let cfg = parse_str("[env]\nname = \"grid_stag_hunt\"\npenalty = -2.0\n").unwrap();
    assert!(matches!(cfg.env, EnvConfig::GridStagHunt(ref g) if g.penalty == -2.0));
    let cfg = parse_str("[env]\nname = \"skirmish\"\n").unwrap();
    assert_eq!(cfg.env.name(), "skirmish");
    let cfg = parse_str("[env]\nname = \"matrix_game\"\npayoff = [[4.0, 0.0], [3.0, 3.0]]\n").unwrap();
    assert_eq!(parse_str(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn train_writes_checkpoints_metrics_and_echo_then_eval_reads_them() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg_path = tmp.path().join("run.toml");
    fs::write(&cfg_path, tiny_config(&out, "")).unwrap();

    let o = ippo(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in 0..3 {
        assert!(seed_dir(&out, s).join(PARAMS_FILE).is_file());
        assert!(seed_dir(&out, s).join(STATE_FILE).is_file());
    }
    let echo = parse_config(&out.join(CONFIG_ECHO)).unwrap();
    assert_eq!(echo, parse_config(&cfg_path).unwrap());
    let groups = read_curves(&out.join(METRICS_DIR)).unwrap();
    assert_eq!(groups.len(), 3);
    for (_, sets) in &groups {
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].label, "ippo");
        assert_eq!(sets[0].seeds, vec![0, 1, 2]);
        assert_eq!(sets[0].x, vec![0, 16, 32, 48]);
    }

    // Refuses to clobber the run without --force.
    let o = ippo(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert!(seed_dir(&out, 2).join(PARAMS_FILE).is_file());

    let o = ippo(&["eval", "--config", out.join(CONFIG_ECHO).to_str().unwrap(), "--seeds", "0,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 2, "{stdout}");
    assert!(stdout.contains("seed 2 iteration 3"), "{stdout}");

    let o = ippo(&["eval", "--config", cfg_path.to_str().unwrap(), "--seeds", "7"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("seed_7"), "{}", stderr(&o));

    // --force replaces the run; a single seed leaves no stale checkpoints.
    let o = ippo(&["train", "--config", cfg_path.to_str().unwrap(), "--seeds", "5", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(seed_dir(&out, 5).join(PARAMS_FILE).is_file());
    assert!(!seed_dir(&out, 0).exists());
}

#[test]
fn reruns_are_reproducible_from_the_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    let cfg_path = tmp.path().join("run.toml");
    fs::write(&cfg_path, tiny_config(&first, "")).unwrap();
    assert!(ippo(&["train", "--config", cfg_path.to_str().unwrap(), "--seeds", "3"]).status.success());
    let second = tmp.path().join("b");
    let o = ippo(&["train", "--config", first.join(CONFIG_ECHO).to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read(seed_dir(&first, 3).join(PARAMS_FILE)).unwrap();
    let b = fs::read(seed_dir(&second, 3).join(PARAMS_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablate_emits_one_curve_family_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablation");
    let cfg_path = tmp.path().join("run.toml");
    fs::write(&cfg_path, tiny_config(&out, "variants = [\"ippo\", \"iac\"]")).unwrap();
    let o = ippo(&["ablate", "--config", cfg_path.to_str().unwrap(), "--seeds", "0,1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let groups = read_curves(&out.join(METRICS_DIR)).unwrap();
    assert_eq!(groups.len(), 3);
    for (_, sets) in &groups {
        let labels: Vec<&str> = sets.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, vec![Variant::Iac.name(), Variant::Ippo.name()]);
    }
    for v in ["ippo", "iac"] {
        for s in 0..2 {
            assert!(seed_dir(&out.join(v), s).join(PARAMS_FILE).is_file());
        }
    }
    assert!(out.join(METRICS_DIR).join("win_rate.svg").is_file());
}

#[test]
fn figure_regenerates_plots_or_reports_missing_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let err = command_figure(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("no metrics found"), "{err}");
    let o = ippo(&["figure", "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no metrics found"), "{}", stderr(&o));

    let out = tmp.path().join("run");
    let cfg_path = tmp.path().join("run.toml");
    fs::write(&cfg_path, tiny_config(&out, "")).unwrap();
    assert!(ippo(&["train", "--config", cfg_path.to_str().unwrap(), "--seeds", "0"]).status.success());
    let svg = out.join(METRICS_DIR).join("mean_return.svg");
    fs::remove_file(&svg).unwrap();
    let o = ippo(&["figure", "--config", cfg_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}
