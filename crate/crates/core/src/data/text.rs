//! Character filtering and word tokenization for dialog text.

fn keep(c: char) -> bool {
    c.is_ascii_lowercase() || matches!(c, '.' | '?' | '!' | '\'' | ' ')
}

fn is_sentence_punct(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

/// Lowercases, deletes every character outside `a-z . ? ! '` and space,
/// collapses whitespace runs and trims.
pub fn clean_text(raw: &str) -> String {
    let filtered: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|&c| keep(c))
        .collect();
    filtered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits cleaned text into tokens: `.`, `?` and `!` become their own
/// tokens, `n't` is split off (`don't` -> `do n't`), and any other
/// apostrophe starts a new token (`i'll` -> `i 'll`).
pub fn tokenize(cleaned: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in cleaned.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if is_sentence_punct(c) {
                split_word(&word, &mut out);
                word.clear();
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        split_word(&word, &mut out);
    }
    out
}

fn split_word(word: &str, out: &mut Vec<String>) {
    if word.is_empty() {
        return;
    }
    let at = match word.find("n't") {
        Some(i) => Some(i),
        None => word.find('\''),
    };
    match at {
        Some(i) if i > 0 => {
            out.push(word[..i].to_string());
            out.push(word[i..].to_string());
        }
        _ => out.push(word.to_string()),
    }
}

/// Cleans and tokenizes raw text in one step.
pub fn normalize(raw: &str) -> Vec<String> {
    tokenize(&clean_text(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cleaning_examples() {
        assert_eq!(clean_text("Hello, World!"), "hello world!");
        assert_eq!(clean_text("abc"), "abc");
        assert_eq!(clean_text("¿123?"), "?");
        assert_eq!(clean_text("  Two\t\tspaces -- here  "), "two spaces here");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("i'll go!"), ["i", "'ll", "go", "!"]);
        assert_eq!(tokenize("don't"), ["do", "n't"]);
        assert_eq!(tokenize("ok."), ["ok", "."]);
        assert_eq!(normalize("Hello, World!"), ["hello", "world", "!"]);
        assert_eq!(
            tokenize("can't ... 'em"),
            ["ca", "n't", ".", ".", ".", "'em"]
        );
        assert_eq!(tokenize("it's you?!"), ["it", "'s", "you", "?", "!"]);
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(s in "\\PC{0,40}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(once.chars().all(keep));
        }

        #[test]
        fn tokens_never_mix_letters_and_punctuation(s in "[a-zA-Z.?!' ,]{0,40}") {
            for tok in normalize(&s) {
                let has_punct = tok.chars().any(is_sentence_punct);
                prop_assert!(!has_punct || tok.chars().count() == 1, "{}", tok);
            }
        }
    }
}
