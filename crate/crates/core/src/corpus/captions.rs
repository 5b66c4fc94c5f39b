//! Caption construction: split a report into sentences, then greedily pack
//! consecutive sentences into captions of at most [`MAX_CAPTION_WORDS`]
//! words. Captions shorter than [`MIN_CAPTION_WORDS`] are discarded, and at
//! most four captions are kept per report.

use super::vocab::{tokenize, Vocabulary};
use super::{Description, MAX_CAPTION_WORDS, MIN_CAPTION_WORDS};
use crate::error::{Error, Result};

pub const MAX_CAPTIONS: usize = 4;

/// Sentence boundary: `.`, `?` or `!` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        cur.push(ch);
        if matches!(ch, '.' | '?' | '!') {
            let at_end = i + 1 >= chars.len();
            let next_ws = !at_end && chars[i + 1].is_whitespace();
            if at_end || next_ws {
                let s = cur.trim().to_string();
                if !s.is_empty() {
                    out.push(s);
                }
                cur.clear();
            }
        }
    }
    let tail = cur.trim().to_string();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Word-level caption texts for a report (no vocabulary involved). Each
/// entry is the token list of one caption, excluding the label prefix.
pub fn make_caption_texts(report_text: &str, _label: &str) -> Vec<Vec<String>> {
    let mut captions: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for sentence in split_sentences(report_text) {
        let words = tokenize(&sentence);
        if words.is_empty() {
            continue;
        }
        if words.len() > MAX_CAPTION_WORDS {
            // a single sentence that cannot fit any caption is skipped
            eprintln!("corpus: skipping over-long sentence ({} words)", words.len());
            continue;
        }
        if current.len() + words.len() <= MAX_CAPTION_WORDS {
            current.extend(words);
        } else {
            captions.push(std::mem::replace(&mut current, words));
        }
    }
    if !current.is_empty() {
        captions.push(current);
    }
    captions.retain(|c| c.len() >= MIN_CAPTION_WORDS);
    captions.truncate(MAX_CAPTIONS);
    captions
}

/// Tokenized captions for one report. Returns an empty list when no caption
/// reaches the word floor (the caller drops the sample).
pub fn make_captions(
    report_text: &str,
    label: &str,
    vocab: &Vocabulary,
) -> Result<Vec<Description>> {
    if report_text.trim().is_empty() {
        return Err(Error::Corpus("empty report text".into()));
    }
    let label_token = vocab.id_of(label);
    if !vocab.is_label(label_token) {
        return Err(Error::Corpus(format!("unknown label `{label}`")));
    }
    Ok(make_caption_texts(report_text, label)
        .into_iter()
        .map(|words| Description {
            label_token,
            caption_tokens: words.iter().map(|w| vocab.id_of(w)).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;

    fn vocab() -> Vocabulary {
        let descs = vec![
            "cardiomegaly : heart size slightly elevated .".to_string(),
            "normal : heart size within normal limits .".to_string(),
        ];
        build_vocabulary(&descs, 1).unwrap()
    }

    #[test]
    fn paper_example_caption() {
        let v = vocab();
        let caps = make_captions("heart size slightly elevated.", "cardiomegaly", &v).unwrap();
        assert_eq!(caps.len(), 1);
        assert_eq!(
            caps[0].token_string(&v),
            "cardiomegaly : heart size slightly elevated ."
        );
    }

    #[test]
    fn four_word_report_is_dropped() {
        let v = vocab();
        // four words, no trailing punctuation; below the 5-word floor
        let caps = make_captions("heart size slightly elevated", "cardiomegaly", &v).unwrap();
        assert!(caps.is_empty());
    }

    #[test]
    fn greedy_packing_splits_when_budget_exceeded() {
        let v = build_vocabulary(
            &["normal : a b c d e f g h i j k l m n o p q r".to_string()],
            1,
        )
        .unwrap();
        // 10-word and 8-word sentences: 10 + 8 > 15, so two captions
        let report = "a b c d e f g h i j. k l m n o p q r.";
        let caps = make_captions(report, "normal", &v).unwrap();
        assert_eq!(caps.len(), 2);
        // counts include the sentence-final period token
        assert_eq!(caps[0].caption_tokens.len(), 11);
        assert_eq!(caps[1].caption_tokens.len(), 9);
    }

    #[test]
    fn two_short_sentences_pack_into_one_caption() {
        let v = build_vocabulary(&["normal : a b c d e f g h".to_string()], 1).unwrap();
        let caps = make_captions("a b c d. e f g h.", "normal", &v).unwrap();
        assert_eq!(caps.len(), 1);
        assert_eq!(caps[0].caption_tokens.len(), 10);
    }

    #[test]
    fn at_most_four_captions() {
        let words: Vec<String> = (0..26).map(|i| format!("w{i}")).collect();
        let mut report = String::new();
        for chunk in words.chunks(2) {
            // 13-word sentences force one caption each
            let mut s = chunk.join(" ");
            for _ in 0..10 {
                s.push_str(" x");
            }
            s.push('.');
            report.push_str(&s);
            report.push(' ');
        }
        let mut corpus = vec![format!("normal : {report}")];
        corpus.push("normal : x x x x x .".into());
        let v = build_vocabulary(&corpus, 1).unwrap();
        let caps = make_captions(&report, "normal", &v).unwrap();
        assert_eq!(caps.len(), 4);
        for c in &caps {
            assert!(c.caption_tokens.len() <= MAX_CAPTION_WORDS);
            assert!(c.caption_tokens.len() >= MIN_CAPTION_WORDS);
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let v = vocab();
        assert!(make_captions("heart size slightly elevated.", "fracture", &v).is_err());
    }

    #[test]
    fn sentence_splitting() {
        let s = split_sentences("one two. three four? five six! seven");
        assert_eq!(s, vec!["one two.", "three four?", "five six!", "seven"]);
    }
}
