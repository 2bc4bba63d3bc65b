/// Maps a key label to a 0–255 code.
///
/// Single printable characters map to their ASCII value. Named keys with an
/// ASCII control code (Enter, Backspace, Tab, Escape, Space, Delete) map to
/// it; everything else (Shift, arrows, function keys, non-ASCII) maps to 0.
/// Also understands the CMU column spellings (`period`, `five`, `Shift.r`).
pub fn key_code_for_name(name: &str) -> u8 {
    let trimmed = name.trim_matches(|c| c == '\'' || c == '"');
    let mut chars = trimmed.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        return if c.is_ascii() { c as u8 } else { 0 };
    }
    if trimmed.is_empty() {
        // A bare space is trimmed away by some exporters.
        return if name.contains(' ') { b' ' } else { 0 };
    }
    if let Some(rest) = trimmed
        .strip_prefix("Shift.")
        .or_else(|| trimmed.strip_prefix("shift."))
    {
        let code = key_code_for_name(rest);
        return code.to_ascii_uppercase();
    }
    let lower = trimmed.to_ascii_lowercase();
    let lower = lower
        .strip_prefix("key.")
        .or_else(|| lower.strip_prefix("vk_"))
        .unwrap_or(&lower);
    match lower {
        "enter" | "return" => 13,
        "backspace" | "back" => 8,
        "tab" => 9,
        "esc" | "escape" => 27,
        "space" | "spacebar" => b' ',
        "delete" | "del" => 127,
        "period" => b'.',
        "comma" => b',',
        "zero" => b'0',
        "one" => b'1',
        "two" => b'2',
        "three" => b'3',
        "four" => b'4',
        "five" => b'5',
        "six" => b'6',
        "seven" => b'7',
        "eight" => b'8',
        "nine" => b'9',
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_characters_named_keys_and_cmu_spellings() {
        assert_eq!(key_code_for_name("a"), 97);
        assert_eq!(key_code_for_name("R"), 82);
        assert_eq!(key_code_for_name("Enter"), 13);
        assert_eq!(key_code_for_name("Return"), 13);
        assert_eq!(key_code_for_name("BACKSPACE"), 8);
        assert_eq!(key_code_for_name("Key.space"), 32);
        assert_eq!(key_code_for_name("Shift"), 0);
        assert_eq!(key_code_for_name("ArrowLeft"), 0);
        assert_eq!(key_code_for_name("é"), 0);
        assert_eq!(key_code_for_name("period"), b'.');
        assert_eq!(key_code_for_name("five"), b'5');
        assert_eq!(key_code_for_name("Shift.r"), b'R');
    }
}
