//! Locality and syntax analyses of a trained tagger over a parsed corpus.

pub mod bias;
pub mod corpus;
pub mod report;
pub mod sensitivity;
pub mod sets;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::parallel::ordered_map;
use crate::scalar::Scalar;
use crate::train::Tagger;

pub use bias::{
    attention_bias, attention_bias_against, average_scores, bias_curves, sentence_head_scores, threshold_curve,
    BiasOptions, CurvePoint, HeadScore, CURVE_THRESHOLDS, HEADMAP_THRESHOLD,
};
pub use corpus::{load_corpus, parse_corpus, SentenceRecord};
pub use sensitivity::{gamma_scores, layer_sensitivity, sensitivity_matrix, Gammas, Measure, SensitivityReport};
pub use sets::{all_token_sets, token_sets, TokenSets, DEFAULT_WINDOW};

/// Per-head bias scores averaged over `corpus`.
pub fn head_bias_scores<T: Scalar>(tagger: &Tagger<T>, corpus: &[SentenceRecord], opts: &BiasOptions) -> Result<Vec<HeadScore>> {
    let per: Vec<Result<Vec<HeadScore>>> = ordered_map(corpus, |rec| {
        let (trace, _) = tagger.forward(&rec.token_ids(tagger.vocab()))?;
        let sets = all_token_sets(rec.len(), &rec.edges, opts.window);
        Ok(sentence_head_scores(&trace.records, &sets, opts))
    });
    let per: Vec<Vec<HeadScore>> = per.into_iter().collect::<Result<_>>()?;
    Ok(average_scores(&per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGamma {
    pub layer: usize,
    pub gamma: Gammas,
    pub sentences: usize,
}

/// γ summaries per layer, averaged uniformly over sentences.
pub fn corpus_gammas<T: Scalar>(
    tagger: &Tagger<T>,
    corpus: &[SentenceRecord],
    measure: Measure,
    window: usize,
) -> Result<Vec<LayerGamma>> {
    let n_layers = tagger.config().n_layers;
    let per: Vec<Result<Vec<Gammas>>> = ordered_map(corpus, |rec| {
        let embedded = tagger.embed_tokens(&rec.token_ids(tagger.vocab()))?;
        let trace = tagger.encoder.encode(&embedded)?;
        let sets = all_token_sets(rec.len(), &rec.edges, window);
        (0..n_layers)
            .map(|l| {
                let beta = layer_sensitivity(&tagger.encoder, trace.layer_input(l), l, measure)?;
                gamma_scores(&beta, &sets)
            })
            .collect()
    });
    let per: Vec<Vec<Gammas>> = per.into_iter().collect::<Result<_>>()?;
    let avg = |xs: Vec<Option<f64>>| {
        let v: Vec<f64> = xs.into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok((0..n_layers)
        .map(|l| LayerGamma {
            layer: l,
            gamma: Gammas {
                local: avg(per.iter().map(|s| s[l].local).collect()),
                syntactic: avg(per.iter().map(|s| s[l].syntactic).collect()),
                unrelated: avg(per.iter().map(|s| s[l].unrelated).collect()),
            },
            sentences: per.len(),
        })
        .collect())
}
