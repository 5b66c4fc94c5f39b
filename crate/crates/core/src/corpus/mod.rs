//! Text and dataset preparation: tokenization, vocabulary, caption
//! splitting/recombination, patient-level splits and image augmentation.

mod vocab;
mod captions;
mod split;
mod augment;
mod dataset;

pub use augment::{augment_image, canvas_size, AugmentMode, CROP_JITTER_FRAC};
pub use captions::{make_caption_texts, make_captions, split_sentences};
pub use dataset::{
    apply_split, load_image, read_index, read_split_file, write_index, write_split_file,
    IndexRecord, SplitFile,
};
pub use split::split_by_patient;
pub use vocab::{
    build_vocabulary, detokenize, tokenize, Vocabulary, BOS, EOS, OOV, PAD, RESERVED,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Hard caption-length limits in words (the label prefix and its colon are
/// not counted; sentence punctuation is).
pub const MAX_CAPTION_WORDS: usize = 15;
pub const MIN_CAPTION_WORDS: usize = 5;

/// Fixed encoded length: label + colon + 15 caption words + EOS.
pub const SEQ_LEN: usize = 18;

/// A tokenized "label: findings" sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    /// First-position diagnosis word id.
    pub label_token: usize,
    /// Caption token ids, between [`MIN_CAPTION_WORDS`] and
    /// [`MAX_CAPTION_WORDS`] entries, excluding the label/colon prefix.
    pub caption_tokens: Vec<usize>,
}

impl Description {
    /// Full id sequence `label : caption EOS`, PAD-padded to [`SEQ_LEN`].
    pub fn sequence(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut seq = Vec::with_capacity(SEQ_LEN);
        seq.push(self.label_token);
        seq.push(vocab.colon_id());
        seq.extend_from_slice(&self.caption_tokens);
        seq.push(EOS);
        while seq.len() < SEQ_LEN {
            seq.push(PAD);
        }
        seq
    }

    /// Number of real (non-pad) tokens in [`Description::sequence`],
    /// including the terminating EOS.
    pub fn real_len(&self) -> usize {
        self.caption_tokens.len() + 3
    }

    /// Space-joined token string, e.g. `cardiomegaly : heart size slightly
    /// elevated .`.
    pub fn token_string(&self, vocab: &Vocabulary) -> String {
        let mut words = vec![vocab.word_of(self.label_token).to_string(), ":".to_string()];
        words.extend(
            self.caption_tokens
                .iter()
                .map(|&t| vocab.word_of(t).to_string()),
        );
        words.join(" ")
    }
}

/// One image with its patient, label and 1-4 descriptions.
#[derive(Debug, Clone)]
pub struct Sample {
    pub patient_id: String,
    pub image_id: String,
    /// Grayscale [0,1] image at storage resolution (slightly larger than the
    /// training size so crops have room).
    pub image: Array2<f64>,
    pub label: String,
    pub descriptions: Vec<Description>,
}

/// Patient-disjoint train/validation/test partition.
#[derive(Debug, Clone, Default)]
pub struct SplitSet {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitSet {
    pub fn patient_ids(samples: &[Sample]) -> std::collections::BTreeSet<&str> {
        samples.iter().map(|s| s.patient_id.as_str()).collect()
    }
}
