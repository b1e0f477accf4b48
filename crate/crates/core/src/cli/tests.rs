use super::*;

const SHIPPED: &str = include_str!("../../../../config/desk.toml");

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("peml").chain(args.iter().copied())).unwrap()
}

#[test]
fn shipped_config_matches_defaults() {
    let cfg = RunConfig::from_toml(SHIPPED).unwrap();
    assert_eq!(cfg, RunConfig::default());
    cfg.validate().unwrap();
}

#[test]
fn partial_sections_fill_from_defaults() {
    let cfg = RunConfig::from_toml("seed = 9\n[train]\nlr = 0.01\n[lora]\nrank = 2\n").unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.train.lr, 0.01);
    assert_eq!(cfg.train.gamma, 0.1);
    assert_eq!(cfg.lora.rank, 2);
    assert_eq!(cfg.lora.alpha, 8.0);
    assert_eq!(cfg.train_config().seed, 9);
}

#[test]
fn unknown_keys_are_rejected_with_their_name() {
    for (text, name) in [
        ("colour = 1\n", "colour"),
        ("[train]\nlearnin_rate = 0.1\n", "learnin_rate"),
        ("[search]\nlayers = 3\n", "layers"),
        ("[hpo.sampler]\nkind = \"grid\"\n", "grid"),
    ] {
        let err = RunConfig::from_toml(text).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains(name), "{err}");
    }
}

#[test]
fn validation_catches_bad_values() {
    let mut cfg = RunConfig::default();
    cfg.train.seed = 4;
    assert!(cfg.validate().unwrap_err().to_string().contains("train.seed"));
    let mut cfg = RunConfig::default();
    cfg.model.n_heads = 5;
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::default();
    cfg.lora.rank = 40;
    assert!(cfg.validate().unwrap_err().to_string().starts_with("configuration error: lora"));
    let mut cfg = RunConfig::default();
    cfg.diagnose.convergence.c = 1000.0;
    assert!(cfg.validate().unwrap_err().to_string().contains("diagnose.convergence"));
}

#[test]
fn flags_take_precedence_over_the_file() {
    let cli = parse(&["--seed", "5", "train", "--lr", "0.02", "--mode", "prefix-only", "--strategy", "ste"]);
    let mut cfg = resolve_config(&cli).unwrap();
    let Command::Train(a) = &cli.command else { panic!() };
    apply_train_args(&mut cfg, a);
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.train.lr, 0.02);
    assert_eq!(cfg.train.mode, TrainMode::PrefixOnly);
    assert_eq!(cfg.train.strategy, Strategy::Ste);

    let cli = parse(&["hpo", "--sampler", "random", "--trials", "7"]);
    let mut cfg = resolve_config(&cli).unwrap();
    let Command::Hpo(a) = &cli.command else { panic!() };
    apply_hpo_args(&mut cfg, a);
    assert_eq!(cfg.hpo.sampler, Sampler::Random);
    assert_eq!(cfg.hpo.n_trials, 7);
}

#[test]
fn exit_codes_follow_the_error_class() {
    assert_eq!(CliError::from(TrainError::Config("x".into())).exit_code(), 1);
    assert_eq!(
        CliError::from(TrainError::Numeric {
            step: 3,
            detail: "nan".into()
        })
        .exit_code(),
        3
    );
    assert_eq!(CliError::Refused("x".into()).exit_code(), 2);
    assert_eq!(CliError::from(HpoError::AllFailed(4)).exit_code(), 3);
    assert_eq!(run(["peml", "frobnicate"]), 1);
}
