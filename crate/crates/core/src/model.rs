//! The text-to-SQL parser: encoder, decoder, grounding head and their parameters.

use std::path::Path;
use std::sync::Arc;

use ctxsql_autograd::{Graph, ParamStore};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::decoder::{self, Decoder, DecoderConfig, Hypothesis};
use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::grammar::{actions_to_sql, Grammar};
use crate::linearize::{build_relations, linearize};
use crate::schema::Schema;
use crate::vocab::Vocab;

pub const SG_WEIGHT: &str = "sg.w";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vocab: Vocab,
    /// Rules text of the grammar the decoder was built for.
    pub grammar: String,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, decoder: DecoderConfig, vocab: Vocab, grammar: &Grammar) -> Self {
        ModelConfig {
            encoder,
            decoder,
            vocab,
            grammar: grammar.to_rules_text(),
        }
    }

    /// Small widths for CPU-scale fixtures.
    pub fn desk(vocab: Vocab, grammar: &Grammar) -> Self {
        ModelConfig::new(
            EncoderConfig {
                layers: 2,
                heads: 4,
                d_h: 32,
                d_k: 8,
                ffn: 64,
                dropout: 0.1,
            },
            DecoderConfig {
                hidden: 32,
                action_dim: 16,
                node_dim: 8,
                att_heads: 4,
                mlp_hidden: 32,
                dropout: 0.2,
                max_steps: 120,
            },
            vocab,
            grammar,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub grammar: Arc<Grammar>,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let grammar = Arc::new(Grammar::parse(&config.grammar)?);
        let params = Self::fresh_params(&config, &grammar, seed)?;
        Ok(Model {
            config,
            grammar,
            params,
        })
    }

    fn fresh_params(config: &ModelConfig, grammar: &Grammar, seed: u64) -> Result<ParamStore> {
        let mut params = ParamStore::new(seed);
        let d = config.encoder.d_h;
        encoder::init_params(&mut params, &config.encoder, config.vocab.len())?;
        decoder::init_params(&mut params, &config.decoder, d, grammar)?;
        params.init_uniform(SG_WEIGHT, &[d, d])?;
        Ok(params)
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            cfg: &self.config.decoder,
            d_h: self.config.encoder.d_h,
            grammar: &self.grammar,
            store: &self.params,
        }
    }

    /// Encodes a question context (or one self-contained question) with the schema.
    pub fn encode(&self, g: &mut Graph, turns: &[&[String]], schema: &Schema) -> Result<EncoderOutput> {
        let input = linearize(turns, schema)?;
        let rel = build_relations(&input, schema);
        encoder::encode(g, &self.params, &self.config.encoder, &self.config.vocab, &input, &rel, schema)
    }

    pub fn beam_search(&self, turns: &[&[String]], schema: &Schema, beam: usize) -> Result<Vec<Hypothesis>> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, turns, schema)?;
        self.decoder()
            .beam_search(&mut g, &enc, schema, beam, self.config.decoder.max_steps)
    }

    /// SQL strings of the ranked beam.
    pub fn predict_beam(&self, turns: &[&[String]], schema: &Schema, beam: usize) -> Result<Vec<String>> {
        self.beam_search(turns, schema, beam)?
            .iter()
            .map(|h| actions_to_sql(&h.actions, schema, &self.grammar))
            .collect()
    }

    pub fn predict(&self, turns: &[&[String]], schema: &Schema, beam: usize) -> Result<String> {
        self.predict_beam(turns, schema, beam)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Invalid("empty beam".into()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = serde_json::to_value(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save_checkpoint(path, &self.params, &cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, cfg) = checkpoint::load_checkpoint(path)?;
        let config: ModelConfig =
            serde_json::from_value(cfg).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        Self::from_parts(config, params)
    }

    /// Checks every parameter against the shapes the config implies.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let grammar = Arc::new(Grammar::parse(&config.grammar)?);
        let expected = Self::fresh_params(&config, &grammar, params.seed())?;
        for (name, p) in expected.iter() {
            let got = params
                .param(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Model {
            config,
            grammar,
            params,
        })
    }
}
