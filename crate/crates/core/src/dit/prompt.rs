use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{RegionId, VariableId};

const TEMPLATE: &str = "Synthesize the {b} variable over the {r} region using corresponding satellite imagery.";

/// Rendered task prompt with its token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub region: RegionId,
    pub variable: VariableId,
    pub text: String,
    pub token_ids: Vec<usize>,
}

/// Closed vocabulary: template words, then region and variable words, first occurrence order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    let template = TEMPLATE.split_whitespace().filter(|w| !w.starts_with('{'));
    let regions = RegionId::ALL.iter().flat_map(|r| r.prompt_name().split_whitespace());
    let variables = VariableId::ALL.iter().flat_map(|v| v.prompt_name().split_whitespace());
    for w in template.chain(regions).chain(variables) {
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let vocab = vocabulary();
    text.split_whitespace()
        .map(|w| vocab.iter().position(|v| *v == w).ok_or_else(|| Error::InvalidArgument(format!("word {w:?} is outside the prompt vocabulary"))))
        .collect()
}

pub fn render_prompt(region: RegionId, variable: VariableId) -> PromptSpec {
    let text = TEMPLATE.replace("{b}", variable.prompt_name()).replace("{r}", region.prompt_name());
    let token_ids = tokenize(&text).expect("template words are in the vocabulary");
    PromptSpec { region, variable, text, token_ids }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_template() {
        let p = render_prompt(RegionId::Conus, VariableId::Precipitation);
        assert_eq!(p.text, "Synthesize the Precipitation variable over the CONUS region using corresponding satellite imagery.");
        let tc = render_prompt(RegionId::TcRegion, VariableId::Mwbt);
        assert_eq!(tc.text, "Synthesize the MWBT variable over the TC Region region using corresponding satellite imagery.");
        assert_eq!(tc.token_ids.len(), 13);
        assert_eq!(render_prompt(RegionId::TcRegion, VariableId::Mwbt).token_ids, tc.token_ids);
        assert!(tokenize("Synthesize rain").is_err());
    }

    #[test]
    fn every_task_prompt_is_distinct() {
        let mut seen = std::collections::HashSet::new();
        for r in RegionId::ALL {
            for v in VariableId::ALL {
                assert!(seen.insert(render_prompt(r, v).token_ids));
            }
        }
    }
}
