//! Caption tokenizer.
//!
//! Lowercase, split on whitespace, then within each chunk emit every emoji
//! (ZWJ sequences, variation selectors, and skin-tone modifiers kept attached)
//! as its own token. Word tokens keep a leading '#' but lose trailing ASCII
//! punctuation; tokens that are nothing but punctuation are dropped.
//!
//! The rules are closed under their own output: re-tokenizing the tokens
//! joined by spaces reproduces them.

const ZWJ: char = '\u{200D}';

fn is_emoji_base(c: char) -> bool {
    matches!(u32::from(c),
        0x1F000..=0x1FAFF   // emoticons, transport, symbols, extended pictographs
        | 0x2600..=0x27BF   // misc symbols and dingbats
        | 0x2B00..=0x2BFF   // stars, arrows
    )
}

/// True for tokens the tokenizer emitted as emoji clusters; their first
/// character is always an emoji base.
pub fn is_emoji_token(token: &str) -> bool {
    token.chars().next().is_some_and(is_emoji_base)
}

/// Marks that extend the preceding emoji rather than standing alone.
fn is_emoji_attachment(c: char) -> bool {
    matches!(u32::from(c),
        0xFE0E | 0xFE0F       // variation selectors
        | 0x1F3FB..=0x1F3FF   // skin tones
        | 0x20E3              // combining keycap
    )
}

pub fn tokenize(caption: &str) -> Vec<String> {
    let lowered = caption.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lowered.split_whitespace() {
        let mut word = String::new();
        let mut chars = chunk.chars().peekable();
        while let Some(c) = chars.next() {
            if is_emoji_base(c) {
                flush_word(&mut word, &mut tokens);
                let mut cluster = String::new();
                cluster.push(c);
                loop {
                    while chars.peek().copied().is_some_and(is_emoji_attachment) {
                        cluster.push(chars.next().unwrap());
                    }
                    // A ZWJ glues the next emoji into the same cluster.
                    if chars.peek() == Some(&ZWJ) {
                        let mut ahead = chars.clone();
                        ahead.next();
                        if ahead.peek().copied().is_some_and(is_emoji_base) {
                            cluster.push(chars.next().unwrap());
                            cluster.push(chars.next().unwrap());
                            continue;
                        }
                    }
                    break;
                }
                tokens.push(cluster);
            } else {
                word.push(c);
            }
        }
        flush_word(&mut word, &mut tokens);
    }
    tokens
}

fn flush_word(word: &mut String, tokens: &mut Vec<String>) {
    while word.chars().next_back().is_some_and(|c| c.is_ascii_punctuation()) {
        word.pop();
    }
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}
