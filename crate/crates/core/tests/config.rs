use clotseg::config::{parse_override, parse_pairs, RunConfig, DEFAULTS};
use clotseg::Error;

fn pairs(text: &str) -> Vec<(String, String)> {
    parse_pairs(text).unwrap()
}

#[test]
fn empty_file_gives_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# nothing set\n\n").unwrap();
    let c = RunConfig::load(Some(&path), &[], None).unwrap();
    assert_eq!(c, RunConfig::default());
    let f = &c.model.fusion;
    assert_eq!((f.n1, f.p1, f.p2, f.d_k), (256, 32, 4, 32));
    assert_eq!((c.model.n_c, c.model.n_l, c.model.m, c.model.w, c.model.s), (4, 9, 3, 3, 12));
    assert_eq!(c.train.lr, 0.01);
    assert_eq!(c.train.batch_size, 2);
    assert_eq!(c.train.extra_epochs_on_resume, 400);
    assert_eq!(c.train.moddrop.keep_prob, 0.5);
    assert_eq!(c.train.moddrop.noise_sigma, 0.01);
    assert_eq!((c.post.n_pixels, c.post.n_dist, c.post.threshold, c.post.alpha_big), (20, 20.0, 0.3, 1.0));
    assert_eq!(c.stride, 6);
    assert_eq!(c.seed, 0);
    assert_eq!(c.to_pairs().len(), DEFAULTS.len());
}

#[test]
fn flags_override_the_file() {
    let file = pairs("train.lr = 0.5\nllstm.n_c = 2 # narrower\n");
    let flags = [parse_override("train.lr=0.001").unwrap()];
    let c = RunConfig::resolve(&file, &flags, None).unwrap();
    assert_eq!(c.train.lr, 0.001);
    assert_eq!(c.model.n_c, 2);
    assert_eq!(c.value("train.lr"), Some("0.001"));
}

#[test]
fn render_round_trips() {
    let c = RunConfig::resolve(&pairs("seed = 9\ntrain.clip_norm = none"), &[], None).unwrap();
    assert_eq!(c.train.clip_norm, None);
    assert_eq!(RunConfig::resolve(&pairs(&c.render()), &[], None).unwrap(), c);
    assert_eq!(c.with("model.stride", 2).unwrap().stride, 2);
}

#[test]
fn indivisible_logic_width_is_rejected() {
    let flags = [parse_override("llstm.n_l=8").unwrap(), parse_override("llstm.m=3").unwrap()];
    let err = RunConfig::resolve(&[], &flags, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("llstm.m=3 must divide llstm.n_l=8"), "{err}");
}

#[test]
fn bad_keys_and_values_are_rejected() {
    let unknown = RunConfig::resolve(&pairs("train.learning_rate = 1"), &[], None).unwrap_err();
    assert!(unknown.to_string().contains("unknown key `train.learning_rate`"));
    let typed = RunConfig::resolve(&pairs("train.epochs = many"), &[], None).unwrap_err();
    assert!(typed.to_string().contains("train.epochs"), "{typed}");
    assert!(RunConfig::resolve(&pairs("moddrop.droppable = T1"), &[], None).is_err());
    assert!(RunConfig::resolve(&pairs("post.connectivity = 18"), &[], None).is_err());
    assert!(RunConfig::resolve(&pairs("moddrop.keep_prob = 1.5"), &[], None).is_err());
    assert!(parse_pairs("no equals sign").is_err());
    assert!(parse_override("train.lr").is_err());
}

#[test]
fn seed_precedence() {
    let file = pairs("seed = 5");
    let flag = [parse_override("seed=6").unwrap()];
    assert_eq!(RunConfig::resolve(&file, &flag, Some("7")).unwrap().seed, 6);
    assert_eq!(RunConfig::resolve(&file, &[], Some("7")).unwrap().seed, 5);
    assert_eq!(RunConfig::resolve(&[], &[], Some("7")).unwrap().seed, 7);
    assert_eq!(RunConfig::resolve(&[], &[], None).unwrap().seed, 0);
    assert!(RunConfig::resolve(&[], &[], Some("x")).is_err());
}
