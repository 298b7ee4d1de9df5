/// Lowercases, splits on whitespace and splits every non-alphanumeric
/// character into its own token. Never emits a token containing `:` glued
/// to letters, so the prompt prefixes `word:` and `context:` cannot arise
/// from corpus text.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::tokenize;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("Ate a DOUBLE portion."), ["ate", "a", "double", "portion", "."]);
        assert_eq!(tokenize("word: x"), ["word", ":", "x"]);
        assert_eq!(tokenize("  \t "), Vec::<String>::new());
        assert_eq!(tokenize("boo bear"), ["boo", "bear"]);
    }
}
