use contiv::effects::VarianceRoute;
use contiv::{Method, Quantity, Target};
use contiv_cli::config::{Bandwidth, Command, Format, GridSpec, NuisanceKind, NuisanceSpec, RunConfig, SimSpec};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, Just(0.1 + 0.2), Just(1.0 / 3.0), Just(f64::MIN_POSITIVE)]
}

fn positive() -> impl Strategy<Value = f64> {
    prop_oneof![1e-6..1e3f64, Just(0.1 + 0.2), Just(1.0 / 3.0)]
}

fn command() -> impl Strategy<Value = Command> {
    prop_oneof![
        Just(Command::EstimateCurve),
        Just(Command::EstimateLiv),
        Just(Command::EstimateLate),
        Just(Command::SelectBandwidth),
        Just(Command::Simulate),
        Just(Command::Generate),
    ]
}

fn config() -> impl Strategy<Value = RunConfig> {
    let head = (
        command(),
        proptest::option::of("[a-z]{1,8}\\.csv"),
        proptest::option::of(prop_oneof![Just("liv-main".to_string()), Just("deriv-only".to_string())]),
        1usize..1_000_000,
        any::<bool>(),
        prop_oneof![Just(Method::LocalPoly), Just(Method::Smooth)],
        prop_oneof![Just(Target::Outcome), Just(Target::Treatment)],
        prop_oneof![Just(Quantity::Value), Just(Quantity::Derivative)],
        proptest::option::of(prop_oneof![Just("gaussian4".to_string()), Just("epanechnikov".to_string())]),
        1usize..5,
    );
    let mid = (
        prop_oneof![Just(Bandwidth::Auto), positive().prop_map(Bandwidth::Value)],
        proptest::option::of(positive()),
        proptest::option::of(proptest::collection::vec(positive(), 0..5)),
        (1usize..500, proptest::option::of(finite()), proptest::option::of(finite())),
        any::<u64>(),
        (
            prop_oneof![Just(NuisanceKind::Learned), Just(NuisanceKind::True), Just(NuisanceKind::Synthetic)],
            proptest::option::of(0.0..1.0f64),
        ),
        prop_oneof![Just(VarianceRoute::RateAware), Just(VarianceRoute::InfluenceExpansion)],
        positive(),
        prop_oneof![Just(Format::Csv), Just(Format::Json)],
        proptest::option::of(1usize..64),
    );
    let sim = (
        proptest::collection::vec(100usize..100_000, 1..4),
        proptest::collection::vec(prop_oneof![0.0..1.0f64, Just(f64::INFINITY)], 1..4),
        2usize..500,
        positive(),
        proptest::option::of(positive()),
        any::<bool>(),
    );
    (head, mid, sim).prop_map(|(h, m, s)| RunConfig {
        command: h.0,
        input: h.1.map(Into::into),
        dgp: h.2,
        n: h.3,
        continuous_treatment: h.4,
        method: h.5,
        target: h.6,
        quantity: h.7,
        kernel: h.8,
        p: h.9,
        bandwidth: m.0,
        bandwidth_treatment: m.1,
        candidates: m.2,
        grid: GridSpec { points: m.3 .0, lo: m.3 .1, hi: m.3 .2 },
        seed: m.4,
        nuisance: NuisanceSpec { kind: m.5 .0, alpha: m.5 .1, ..NuisanceSpec::default() },
        variance_route: m.6,
        relevance_floor: m.7,
        format: m.8,
        jobs: m.9,
        simulation: SimSpec { ns: s.0, alphas: s.1, reps: s.2, h: s.3, smoothness: s.4, timing: s.5, ..SimSpec::default() },
        ..RunConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn config_round_trips_through_toml(cfg in config()) {
        let text = cfg.to_toml();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
