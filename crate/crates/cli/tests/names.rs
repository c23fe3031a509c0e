//! Every configuration name used in the result figures resolves, and the
//! structured fields it implies are the ones the figures describe.

use std::path::Path;

use branchnet::branch::Reduction;
use branchnet::transform::TransformKind;
use branchnet_cli::config::{parse_config_str, parse_name, ExperimentConfig, Placement};

fn resolve(name: &str, arch: &str) -> ExperimentConfig {
    let text = format!(
        "name = \"{name}\"\n{arch}\n[dataset]\nkind = \"synth\"\n[optim]\nepochs = 1\n"
    );
    parse_config_str(&text, "names")
        .and_then(|c| c.resolve(Path::new("/")))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

const PREACT110: &str = "[arch]\nkind = \"preact_resnet\"\ndepth_n = 18";
const RESNET18: &str = "[arch]\nkind = \"resnet18\"";

/// (name, placement, train, infer, tta)
fn table() -> Vec<(&'static str, Placement, Reduction, Reduction, bool)> {
    use Placement::*;
    use Reduction::*;
    vec![
        ("vanilla", Plain, Vanilla, Vanilla, false),
        ("vanilla-tta-max", Plain, Vanilla, Max, true),
        ("vanilla-tta-sum", Plain, Vanilla, Sum, true),
        ("vanilla-tta-geo", Plain, Vanilla, Geo, true),
        ("flip-1-max", LastN(1), Max, Max, false),
        ("flip-2-max", LastN(2), Max, Max, false),
        ("flip-3-max", LastN(3), Max, Max, false),
        ("flip-4-max", LastN(4), Max, Max, false),
        ("flip-3-max-tta", LastN(3), Max, Max, true),
        ("flip-4-max-tta", LastN(4), Max, Max, true),
        ("flip-3-max,sum", LastN(3), Max, Sum, false),
        ("flip-3-none,geo", LastN(3), None, Geo, false),
        ("flip-only2-max,sum", Only(2), Max, Sum, false),
        ("flip-only2-none,geo", Only(2), None, Geo, false),
    ]
}

#[test]
fn figure_names_agree_with_fields() {
    for (arch, last) in [(PREACT110, 54isize), (RESNET18, 9)] {
        for (name, placement, train, infer, tta) in table() {
            let plan = parse_name(name).unwrap().unwrap();
            assert_eq!(plan.placement, placement, "{name}");
            let cfg = resolve(name, arch);
            assert_eq!(cfg.train_reduction(), train, "{name}");
            assert_eq!(cfg.infer_reduction(), infer, "{name}");
            assert_eq!(cfg.tta(), tta, "{name}");
            let b = cfg.branchings();
            let spots: Vec<isize> = b.keys().copied().collect();
            let expect: Vec<isize> = match placement {
                Placement::Plain => vec![],
                Placement::LastN(n) => (last - n as isize..last).collect(),
                Placement::Only(k) => vec![last - k as isize],
                Placement::Unplaced => unreachable!(),
            };
            assert_eq!(spots, expect, "{name}");
            for specs in b.values() {
                let kinds: Vec<TransformKind> = specs.iter().map(|s| s.kind).collect();
                assert_eq!(kinds, [TransformKind::Identity, TransformKind::FlipH], "{name}");
            }
            // Restating the implied fields is accepted; contradicting them is not.
            let restated = format!(
                "name = \"{name}\"\ntrain_reduction = \"{train}\"\ninfer_reduction = \"{infer}\"\ntta = {tta}\n{arch}\n[dataset]\nkind = \"synth\"\n[optim]\nepochs = 1\n"
            );
            assert!(parse_config_str(&restated, "r").unwrap().resolve(Path::new("/")).is_ok(), "{name}");
            let flipped = restated.replace(&format!("tta = {tta}"), &format!("tta = {}", !tta));
            assert!(parse_config_str(&flipped, "r").unwrap().resolve(Path::new("/")).is_err(), "{name}");
        }
    }
}

#[test]
fn impact_figure_names_need_spots() {
    for name in ["rotation-none,geo", "scale-none,geo", "flip-none,geo"] {
        let plan = parse_name(name).unwrap().unwrap();
        assert_eq!(plan.placement, Placement::Unplaced);
        assert_eq!((plan.train_reduction, plan.infer_reduction), (Some(Reduction::None), Some(Reduction::Geo)));
    }
    assert_eq!(parse_name("rotation-none,geo").unwrap().unwrap().transform, Some(TransformKind::Rotate));
    assert_eq!(parse_name("scale-none,geo").unwrap().unwrap().transform, Some(TransformKind::Scale));
}

#[test]
fn malformed_names() {
    for name in ["flip-3", "flip-x-max", "flip-only-max", "flip-0-max", "flip-3-max-tta-tta", "vanilla-max", "flip-3-max,sum,geo"] {
        assert!(parse_name(name).is_err(), "{name} should be rejected");
    }
    assert!(parse_name("my-own-run").unwrap().is_none());
    // More spots than the network has.
    let text = "name = \"flip-4-max\"\n[arch]\nkind = \"custom\"\nstage_blocks = [1]\nwidths = [4]\n[dataset]\nkind = \"synth\"\n[optim]\nepochs = 1\n";
    assert!(parse_config_str(text, "t").unwrap().resolve(Path::new("/")).is_err());
}
