//! Pairwise definition judging with a constrained-choice client. The two
//! definitions and the tie option are presented in a random order on every
//! call and the reply is mapped back to canonical labels, so an
//! order-biased judge cannot systematically favor either side.

use std::time::Duration;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{CollegeError, Result};

pub const TIE_OPTION: &str = "The two definitions are equally good.";

/// Canonical outcome after de-randomization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeOutcome {
    A,
    B,
    Tie,
    /// The client never produced a usable constrained reply; excluded from
    /// rating updates.
    Abstain,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub outcome: JudgeOutcome,
    /// Label shown in slot i: 0 = definition A, 1 = definition B, 2 = tie.
    pub presented: [u8; 3],
    pub attempts: u32,
}

/// A constrained-choice judge: given the word and three presented options,
/// return the index of the chosen option.
pub trait JudgeClient {
    fn pick(&self, word: &str, options: &[String; 3]) -> Result<usize>;
}

/// Randomizes presentation, queries the judge with bounded retries, and
/// maps the reply back to canonical labels.
pub fn judge_pair(
    judge: &dyn JudgeClient,
    word: &str,
    def_a: &str,
    def_b: &str,
    rng: &mut impl Rng,
    max_retries: u32,
) -> Result<JudgeVerdict> {
    let mut order = [0u8, 1, 2];
    for i in (1..3).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let text_for = |label: u8| -> String {
        match label {
            0 => def_a.to_string(),
            1 => def_b.to_string(),
            _ => TIE_OPTION.to_string(),
        }
    };
    let options = [
        text_for(order[0]),
        text_for(order[1]),
        text_for(order[2]),
    ];
    let mut attempts = 0;
    while attempts <= max_retries {
        attempts += 1;
        match judge.pick(word, &options) {
            Ok(slot) if slot < 3 => {
                let outcome = match order[slot] {
                    0 => JudgeOutcome::A,
                    1 => JudgeOutcome::B,
                    _ => JudgeOutcome::Tie,
                };
                return Ok(JudgeVerdict {
                    outcome,
                    presented: order,
                    attempts,
                });
            }
            _ => continue,
        }
    }
    Ok(JudgeVerdict {
        outcome: JudgeOutcome::Abstain,
        presented: order,
        attempts,
    })
}

/// Chat-completion judge over HTTP. The endpoint, model name and prompt
/// template come from configuration; the key is read from an environment
/// variable at call time.
pub struct HttpJudgeClient {
    pub url: String,
    pub model: String,
    pub api_key_env: String,
    pub prompt_template: String,
    pub timeout: Duration,
}

pub const DEFAULT_JUDGE_PROMPT: &str = "Which option best defines the word \"{word}\"?\n\
{options}\n\
Answer with exactly one digit: 1, 2 or 3.";

impl HttpJudgeClient {
    pub fn new(url: &str, model: &str, api_key_env: &str) -> Self {
        HttpJudgeClient {
            url: url.to_string(),
            model: model.to_string(),
            api_key_env: api_key_env.to_string(),
            prompt_template: DEFAULT_JUDGE_PROMPT.to_string(),
            timeout: Duration::from_secs(30),
        }
    }

    fn prompt(&self, word: &str, options: &[String; 3]) -> String {
        let listed = options
            .iter()
            .enumerate()
            .map(|(i, o)| format!("{}. {o}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        self.prompt_template
            .replace("{word}", word)
            .replace("{options}", &listed)
    }
}

impl JudgeClient for HttpJudgeClient {
    fn pick(&self, word: &str, options: &[String; 3]) -> Result<usize> {
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            CollegeError::Judge(format!("environment variable {} not set", self.api_key_env))
        })?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt(word, options)}],
            "temperature": 0.0,
            "max_tokens": 8,
        });
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build();
        let agent = ureq::Agent::from(config);
        let mut resp = agent
            .post(&self.url)
            .header("authorization", format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| CollegeError::Judge(format!("request failed: {e}")))?;
        let parsed: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| CollegeError::Judge(format!("bad response body: {e}")))?;
        let content = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| CollegeError::Judge("response lacks message content".into()))?;
        parse_choice(content)
            .ok_or_else(|| CollegeError::Judge(format!("unconstrained reply {content:?}")))
    }
}

/// First digit 1-3 anywhere in the reply.
pub fn parse_choice(reply: &str) -> Option<usize> {
    reply.chars().find_map(|c| match c {
        '1' => Some(0),
        '2' => Some(1),
        '3' => Some(2),
        _ => None,
    })
}

/// Offline stubs selectable from configuration.
pub enum StubJudge {
    /// Always prefers the first-presented option.
    FirstPresented,
    /// Picks the longer definition; tie option only when equal.
    Longer,
    /// Always returns the tie option.
    AlwaysTie,
    /// Always replies outside the constrained set.
    Broken,
}

impl JudgeClient for StubJudge {
    fn pick(&self, _word: &str, options: &[String; 3]) -> Result<usize> {
        match self {
            StubJudge::FirstPresented => Ok(0),
            StubJudge::Longer => {
                let mut defs: Vec<(usize, usize)> = options
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.as_str() != TIE_OPTION)
                    .map(|(i, o)| (o.len(), i))
                    .collect();
                defs.sort();
                match defs.last() {
                    Some(&(len, i)) if defs.iter().filter(|(l, _)| *l == len).count() == 1 => {
                        Ok(i)
                    }
                    _ => Ok(options
                        .iter()
                        .position(|o| o == TIE_OPTION)
                        .expect("tie option missing")),
                }
            }
            StubJudge::AlwaysTie => Ok(options
                .iter()
                .position(|o| o == TIE_OPTION)
                .expect("tie option missing")),
            StubJudge::Broken => Err(CollegeError::Judge("stub always fails".into())),
        }
    }
}
