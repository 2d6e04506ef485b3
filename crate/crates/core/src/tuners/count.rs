//! Trainable-parameter accounting.
//!
//! Two independent routes: summing element counts of parameters flagged
//! trainable ([`ParamCount::from_params`]), and closed-form per-tuner formulas
//! ([`analytic_tuner_params`]). By default the classifier head and the bias of
//! each tuner's output projection are excluded.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{BackboneDims, TunerConfig};
use crate::nn::ParamInfo;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CountOptions {
    pub include_head: bool,
    pub include_output_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComponentCount {
    pub component: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub components: Vec<ComponentCount>,
    pub total: usize,
}

fn is_output_bias(name: &str) -> bool {
    name.starts_with("tuners.") && (name.ends_with(".o.bias") || name.ends_with(".up.bias"))
}

/// Group label: `head`, `<kind>@<op>` for tuners, or `backbone`.
fn component_of(name: &str) -> String {
    if name.starts_with("head.") {
        return "head".into();
    }
    let parts: Vec<&str> = name.split('.').collect();
    if parts.len() > 3 && parts[0] == "tuners" {
        return format!("{}@{}", parts[3].replace('_', "-"), parts[2]);
    }
    "backbone".into()
}

impl ParamCount {
    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a ParamInfo>, opts: CountOptions) -> Self {
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        for p in params {
            if !p.trainable {
                continue;
            }
            let component = component_of(&p.name);
            if component == "head" && !opts.include_head {
                continue;
            }
            if is_output_bias(&p.name) && !opts.include_output_bias {
                continue;
            }
            *groups.entry(component).or_default() += p.numel();
        }
        let components: Vec<ComponentCount> = groups
            .into_iter()
            .map(|(component, count)| ComponentCount { component, count })
            .collect();
        let total = components.iter().map(|c| c.count).sum();
        ParamCount { components, total }
    }
}

/// Closed-form trainable count of one tuner.
///
/// * Res-Attn: `dim·3rh (+3rh qkv bias) + rh·dim (+dim o bias)`
/// * prefix: `2·L·dim + dim² (+dim o bias)`
/// * prompt: `L·dim`
/// * adapter: `dim·m + m + m·dim (+dim up bias)`
pub fn analytic_tuner_params(tc: &TunerConfig, dims: BackboneDims, include_output_bias: bool) -> usize {
    let d = dims.dim;
    let ob = if include_output_bias { d } else { 0 };
    match *tc {
        TunerConfig::ResAttn {
            rank,
            heads,
            qkv_bias,
            ..
        } => {
            let rh = rank * heads;
            d * 3 * rh + if qkv_bias { 3 * rh } else { 0 } + rh * d + ob
        }
        TunerConfig::Prefix { length } => 2 * length * d + d * d + ob,
        TunerConfig::Prompt { length } => length * d,
        TunerConfig::Adapter { bottleneck } => d * bottleneck + bottleneck + bottleneck * d + ob,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_labels() {
        assert_eq!(component_of("head.weight"), "head");
        assert_eq!(component_of("tuners.3.mha.res_attn.o.bias"), "res-attn@mha");
        assert_eq!(component_of("blocks.0.attn.qkv.weight"), "backbone");
        assert!(is_output_bias("tuners.0.ffn.adapter.up.bias"));
        assert!(!is_output_bias("tuners.0.ffn.res_attn.qkv.bias"));
    }

    #[test]
    fn res_attn_formula_examples() {
        let vit = BackboneDims { dim: 768, heads: 12 };
        let per = analytic_tuner_params(&TunerConfig::res_attn(8, 8), vit, false);
        assert_eq!(12 * per, 2_359_296);
        let per = analytic_tuner_params(&TunerConfig::res_attn(4, 4), vit, false);
        assert_eq!(12 * per, 589_824);
        let toy = BackboneDims { dim: 8, heads: 2 };
        let per = analytic_tuner_params(&TunerConfig::res_attn(2, 2), toy, true);
        assert_eq!(2 * per, 272);
    }
}
