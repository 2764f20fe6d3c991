use serde::{Deserialize, Serialize};

use super::MultimodalPrompt;
use crate::eval::extract_answer;

const HAR_TEMPLATE: &str = include_str!("../../templates/har_rationale.txt");
const SLEEP_TEMPLATE: &str = include_str!("../../templates/sleep_rationale.txt");
const ECG_TEMPLATE: &str = include_str!("../../templates/ecg_rationale.txt");

/// Client settings recorded with every external rationale request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { model: "gpt-4o-2024-08-06".into(), temperature: 0.3, seed: 42 }
    }
}

/// An external text generator (a hosted LLM in practice). Nothing in this
/// crate calls a network service; callers plug one in.
pub trait RationaleGenerator {
    fn params(&self) -> GenerationParams {
        GenerationParams::default()
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> std::result::Result<String, String>;
}

pub fn template_rationale(cue: &str, label: &str) -> String {
    format!("The signal shows {cue}. Answer: {label}")
}

pub fn har_rationale_prompt(correct: &str, dissimilar: &str) -> String {
    HAR_TEMPLATE.replace("[CORRECT_ACTIVITY]", correct).replace("[DISSIMILAR_ACTIVITY]", dissimilar)
}

pub fn sleep_rationale_prompt(first: &str, second: &str, correct: &str) -> String {
    SLEEP_TEMPLATE
        .replace("[SLEEP_STAGE_1]", first)
        .replace("[SLEEP_STAGE_2]", second)
        .replace("[CORRECT_SLEEP_STAGE]", correct)
}

pub fn ecg_rationale_prompt(context: &str, question: &str, first: &str, second: &str, correct: &str) -> String {
    ECG_TEMPLATE
        .replace("[CLINICAL_CONTEXT]", context)
        .replace("[QUESTION]", question)
        .replace("[ANSWER_OPTION_1]", first)
        .replace("[ANSWER_OPTION_2]", second)
        .replace("[CORRECT_ANSWER]", correct)
}

/// Fill `sample.target` with a rationale. With a generator the prepared
/// prompt is forwarded as is; without one, or when the generator fails or
/// its text does not end in the answer template, the deterministic
/// template rationale is used.
pub fn rationale_stub(
    sample: &mut MultimodalPrompt,
    cue: &str,
    prompt: &str,
    generator: Option<&dyn RationaleGenerator>,
    classes: &[String],
) {
    let fallback = template_rationale(cue, &sample.label);
    sample.target = match generator {
        None => fallback,
        Some(g) => match g.generate(prompt, &g.params()) {
            Ok(text) if extract_answer(&text, classes).as_deref() == Some(sample.label.as_str()) => {
                text
            }
            Ok(_) => {
                log::warn!("generated rationale does not end with the expected answer; using template");
                fallback
            }
            Err(e) => {
                log::warn!("rationale generator failed ({e}); using template");
                fallback
            }
        },
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use std::cell::RefCell;

    struct Recorder {
        seen: RefCell<Vec<(String, GenerationParams)>>,
        reply: std::result::Result<String, String>,
    }

    impl RationaleGenerator for Recorder {
        fn generate(&self, prompt: &str, params: &GenerationParams) -> std::result::Result<String, String> {
            self.seen.borrow_mut().push((prompt.to_string(), params.clone()));
            self.reply.clone()
        }
    }

    fn sample() -> MultimodalPrompt {
        MultimodalPrompt {
            pre: String::new(),
            chunks: vec![],
            post: String::new(),
            target: String::new(),
            label: "walking".into(),
            split: Split::Train,
        }
    }

    fn classes() -> Vec<String> {
        vec!["walking".into(), "sitting".into()]
    }

    #[test]
    fn no_client_uses_template() {
        let mut s = sample();
        rationale_stub(&mut s, "a steady gait", "unused", None, &classes());
        assert_eq!(s.target, "The signal shows a steady gait. Answer: walking");
        assert!(s.target.ends_with("Answer: walking"));
    }

    #[test]
    fn client_gets_prompt_verbatim_with_default_params() {
        let prompt = har_rationale_prompt("walking", "sitting");
        assert!(prompt.contains("Do **not** mention either class label until the final sentence."));
        assert!(prompt.contains("walking\nsitting\n"));
        assert!(prompt.contains("with \"Answer: walking\":"));
        let rec = Recorder { seen: RefCell::new(vec![]), reply: Ok("Rhythmic. Answer: walking".into()) };
        let mut s = sample();
        rationale_stub(&mut s, "cue", &prompt, Some(&rec), &classes());
        assert_eq!(s.target, "Rhythmic. Answer: walking");
        let seen = rec.seen.borrow();
        assert_eq!(seen[0].0, prompt);
        assert_eq!(seen[0].1.temperature, 0.3);
        assert_eq!(seen[0].1.seed, 42);
        assert_eq!(seen[0].1.model, "gpt-4o-2024-08-06");
    }

    #[test]
    fn client_failure_keeps_template() {
        let rec = Recorder { seen: RefCell::new(vec![]), reply: Err("timeout".into()) };
        let mut s = sample();
        rationale_stub(&mut s, "cue", "p", Some(&rec), &classes());
        assert!(s.target.ends_with("Answer: walking"));
        let wrong = Recorder { seen: RefCell::new(vec![]), reply: Ok("Answer: sitting".into()) };
        rationale_stub(&mut s, "cue", "p", Some(&wrong), &classes());
        assert!(s.target.starts_with("The signal shows"));
    }

    #[test]
    fn placeholders_all_filled() {
        for p in [
            har_rationale_prompt("a", "b"),
            sleep_rationale_prompt("a", "b", "a"),
            ecg_rationale_prompt("c", "q", "yes", "no", "yes"),
        ] {
            assert!(!p.contains('['), "{p}");
        }
    }
}
