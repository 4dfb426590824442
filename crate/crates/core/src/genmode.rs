//! Generation-mode detector: render a four-part prompt (description,
//! instruction, input, blank response), fine-tune on response tokens only,
//! decode greedily until EOS, then read the verdict word out of the
//! generated text.

use crate::model::{ForwardCtx, Model, ModelError};
use crate::numerics::{Graph, Scalar, Var};
use crate::tokenizer::{self, TokenId, TokenizerError, EOS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error(
        "rendered prompt ({rendered} tokens) plus generation budget ({budget}) exceeds the \
         model context ({max}); shorten the payload"
    )]
    PromptTooLong {
        rendered: usize,
        budget: usize,
        max: usize,
    },
    #[error("prompt plus response ({len} tokens) exceeds the model context ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("bad generation budget: {0}")]
    BadBudget(String),
    #[error("bad prompt template: {0}")]
    BadTemplate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Token(#[from] TokenizerError),
}

pub type Result<T, E = GenError> = std::result::Result<T, E>;

/// Separator between the description and instruction sections.
pub const SECTION_SEP: &str = "\n\n";

/// Task framing placed at the top of every generation-mode prompt.
pub const DEFAULT_DESCRIPTION: &str = "You are an analyst of short text fragments. \
Linguistic steganography hides a secret payload in ordinary-looking prose by steering \
successive word choices with an encoder, while a cover text is written with no hidden \
payload. Judge from the phrasing and statistical texture of the input which kind this is.";

/// Default instruction line for generation mode.
pub const DEFAULT_INSTRUCTION: &str = "State whether the input is cover or stego.";

/// Four-part prompt: description, instruction, input, then a blank
/// response slot. `input_header` and `response_header` carry their own
/// surrounding whitespace, copied verbatim from the template file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub description: String,
    pub instruction: String,
    pub input_header: String,
    pub response_header: String,
}

impl PromptTemplate {
    /// Parses a template file — plain text with `{description}`,
    /// `{instruction}`, and `{input}` placeholders in that order — and
    /// fills in the description and instruction.
    pub fn parse(template_text: &str, description: &str, instruction: &str) -> Result<Self> {
        let after_desc = template_text
            .strip_prefix("{description}")
            .ok_or_else(|| GenError::BadTemplate("must start with {description}".into()))?;
        let (sep, after_instr) = after_desc
            .split_once("{instruction}")
            .ok_or_else(|| GenError::BadTemplate("missing {instruction}".into()))?;
        if sep != SECTION_SEP {
            return Err(GenError::BadTemplate(format!(
                "description and instruction must be separated by a blank line, found {sep:?}"
            )));
        }
        let (input_header, response_header) = after_instr
            .split_once("{input}")
            .ok_or_else(|| GenError::BadTemplate("missing {input}".into()))?;
        if input_header.is_empty() || response_header.is_empty() {
            return Err(GenError::BadTemplate(
                "input and response sections need header text".into(),
            ));
        }
        Ok(Self {
            description: description.to_owned(),
            instruction: instruction.to_owned(),
            input_header: input_header.to_owned(),
            response_header: response_header.to_owned(),
        })
    }

    /// Renders the prompt for one payload. Deterministic; the output ends
    /// exactly at the response header, leaving the response slot blank.
    pub fn render(&self, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            self.description.len() + self.instruction.len() + self.scaffold_len() + payload.len(),
        );
        out.extend_from_slice(self.description.as_bytes());
        out.extend_from_slice(SECTION_SEP.as_bytes());
        out.extend_from_slice(self.instruction.as_bytes());
        out.extend_from_slice(self.input_header.as_bytes());
        out.extend_from_slice(payload);
        out.extend_from_slice(self.response_header.as_bytes());
        out
    }

    /// Fixed scaffolding bytes: both headers plus the section separator.
    pub fn scaffold_len(&self) -> usize {
        self.input_header.len() + self.response_header.len() + SECTION_SEP.len()
    }

    /// Byte offset of the payload within the rendered prompt.
    pub fn payload_start(&self) -> usize {
        self.description.len() + SECTION_SEP.len() + self.instruction.len()
            + self.input_header.len()
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(
            include_str!("../templates/default_prompt.txt"),
            DEFAULT_DESCRIPTION,
            DEFAULT_INSTRUCTION,
        )
        .expect("bundled template parses")
    }
}

/// Decoding limits: greedy, stop at EOS or after `max_new_tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationBudget {
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for GenerationBudget {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            temperature: 0.0,
        }
    }
}

impl GenerationBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(GenError::BadBudget("max_new_tokens must be >= 1".into()));
        }
        if self.temperature != 0.0 {
            return Err(GenError::BadBudget(
                "only greedy decoding (temperature 0) is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Renders and tokenizes the prompt: BOS followed by the prompt bytes,
/// ending exactly at the response header.
pub fn build_prompt(
    template: &PromptTemplate,
    payload: &[u8],
    budget: &GenerationBudget,
    max_seq_len: usize,
) -> Result<Vec<TokenId>> {
    budget.validate()?;
    let rendered = template.render(payload);
    let n_tokens = rendered.len() + 1; // BOS
    if n_tokens + budget.max_new_tokens > max_seq_len {
        return Err(GenError::PromptTooLong {
            rendered: n_tokens,
            budget: budget.max_new_tokens,
            max: max_seq_len,
        });
    }
    Ok(tokenizer::encode(&rendered, true, false))
}

/// Anything that can score the next token given a prefix — the real model
/// or a scripted stand-in. One call is one forward pass.
pub trait NextTokenModel {
    fn next_token_logits(&self, prefix: &[TokenId]) -> std::result::Result<Vec<f64>, ModelError>;
}

impl<S: Scalar> NextTokenModel for Model<S> {
    fn next_token_logits(&self, prefix: &[TokenId]) -> std::result::Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let out = self.forward_causal_lm(&mut g, prefix, &mut ctx)?;
        let value = g.value(out);
        let v = self.cfg.vocab_size;
        let last = &value.data()[(prefix.len() - 1) * v..prefix.len() * v];
        Ok(last.iter().map(|x| x.as_f64()).collect())
    }
}

impl<M: NextTokenModel + ?Sized> NextTokenModel for &M {
    fn next_token_logits(&self, prefix: &[TokenId]) -> std::result::Result<Vec<f64>, ModelError> {
        (**self).next_token_logits(prefix)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy autoregressive decoding: each step feeds the prompt plus all
/// previously generated tokens back through the model and takes the argmax.
/// Stops after emitting EOS or exhausting the budget. Returned ids exclude
/// the prompt; the forward-pass count equals the number of returned tokens.
pub fn generate<M: NextTokenModel>(
    model: &M,
    prompt_ids: &[TokenId],
    budget: &GenerationBudget,
) -> Result<Vec<TokenId>> {
    budget.validate()?;
    let mut seq = prompt_ids.to_vec();
    let mut out = Vec::new();
    for _ in 0..budget.max_new_tokens {
        let logits = model.next_token_logits(&seq)?;
        let next = argmax(&logits) as TokenId;
        out.push(next);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

/// The three-way outcome of reading a generated response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Cover,
    Stego,
    Unparseable,
}

/// Case-insensitive scan for the first occurrence of "cover" or "stego".
pub fn parse_label(generated_text: &[u8]) -> Verdict {
    const COVER: &[u8] = b"cover";
    const STEGO: &[u8] = b"stego";
    for start in 0..generated_text.len() {
        let rest = &generated_text[start..];
        if rest.len() >= 5 {
            if rest[..5].eq_ignore_ascii_case(COVER) {
                return Verdict::Cover;
            }
            if rest[..5].eq_ignore_ascii_case(STEGO) {
                return Verdict::Stego;
            }
        }
    }
    Verdict::Unparseable
}

/// The literal response tokens a generation-mode model is trained to emit
/// for each class (EOS is appended by the loss/decoder, not included here).
pub fn verdict_target_ids(is_stego: bool) -> Vec<TokenId> {
    let word: &[u8] = if is_stego { b"stego" } else { b"cover" };
    word.iter().map(|&b| b as TokenId).collect()
}

/// Next-token cross-entropy averaged over the response positions and the
/// terminal EOS only; prompt positions carry zero weight. The EOS target is
/// appended internally, so `target_response_ids` holds just the response.
pub fn genmode_loss<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    ctx: &mut ForwardCtx,
    prompt_ids: &[TokenId],
    target_response_ids: &[TokenId],
) -> Result<Var> {
    let mut full = Vec::with_capacity(prompt_ids.len() + target_response_ids.len() + 1);
    full.extend_from_slice(prompt_ids);
    full.extend_from_slice(target_response_ids);
    full.push(EOS);
    let max = model.cfg.max_seq_len;
    if full.len() > max {
        return Err(GenError::SequenceTooLong {
            len: full.len(),
            max,
        });
    }
    if prompt_ids.is_empty() {
        return Err(GenError::BadTemplate("empty prompt".into()));
    }
    // Row t of the logits predicts full[t + 1]; rows covering the response
    // and the EOS are exactly prompt_len-1 ..= full_len-2.
    let input = &full[..full.len() - 1];
    let logits = model.forward_causal_lm(g, input, ctx)?;
    let targets: Vec<usize> = full[1..].iter().map(|&id| id as usize).collect();
    let first_scored = prompt_ids.len() - 1;
    let weights: Vec<S> = (0..targets.len())
        .map(|t| {
            if t >= first_scored {
                S::one()
            } else {
                S::zero()
            }
        })
        .collect();
    Ok(g.cross_entropy_mean(logits, &targets, &weights)?)
}

/// End-to-end generation-mode inference for one payload: build the prompt,
/// decode, and parse the verdict. Returns the verdict and the raw response
/// bytes (specials stripped).
pub fn predict_gen<M: NextTokenModel>(
    model: &M,
    template: &PromptTemplate,
    payload: &[u8],
    budget: &GenerationBudget,
    max_seq_len: usize,
) -> Result<(Verdict, Vec<u8>)> {
    let prompt = build_prompt(template, payload, budget, max_seq_len)?;
    let ids = generate(model, &prompt, budget)?;
    let text = tokenizer::decode(&ids)?;
    Ok((parse_label(&text), text))
}
