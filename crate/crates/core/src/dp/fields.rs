//! Format-preserving noise and redaction for structured fields.

use chrono::{Datelike, NaiveDate};
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{noise_integer, DpError, Mechanism};
use crate::detect::Category;

pub const LAST4_SENSITIVITY: f64 = 100.0;
pub const DATE_SENSITIVITY_DAYS: f64 = 30.0;
pub const ZIP_SENSITIVITY: f64 = 10.0;

/// Per-field global sensitivities used as the Laplace numerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sensitivities {
    pub phone_last4: f64,
    pub card_last4: f64,
    pub ssn_last4: f64,
    pub zip: f64,
    pub date_days: f64,
}

impl Default for Sensitivities {
    fn default() -> Self {
        Self {
            phone_last4: LAST4_SENSITIVITY,
            card_last4: LAST4_SENSITIVITY,
            ssn_last4: LAST4_SENSITIVITY,
            zip: ZIP_SENSITIVITY,
            date_days: DATE_SENSITIVITY_DAYS,
        }
    }
}

/// A transformed field and what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNoise {
    pub text: String,
    pub epsilon_spent: f64,
    pub mechanism: Mechanism,
}

impl FieldNoise {
    fn laplace(text: String, epsilon: f64) -> Self {
        Self { text, epsilon_spent: epsilon, mechanism: Mechanism::Laplace }
    }

    fn redacted(text: String) -> Self {
        Self { text, epsilon_spent: 0.0, mechanism: Mechanism::Redact }
    }
}

/// Category-generic redaction. Structured fields keep their punctuation with
/// every letter and digit replaced by `X`; contextual fields become a tag.
pub fn redact(text: &str, category: Category) -> String {
    if category.is_contextual() {
        format!("[{}]", category.as_str().to_uppercase())
    } else {
        text.chars().map(|c| if c.is_alphanumeric() { 'X' } else { c }).collect()
    }
}

/// Byte range of the last run of ASCII digits.
fn last_digit_group(s: &str) -> Option<(usize, usize)> {
    let bytes = s.as_bytes();
    let end = bytes.iter().rposition(u8::is_ascii_digit)? + 1;
    let start = bytes[..end].iter().rposition(|b| !b.is_ascii_digit()).map_or(0, |i| i + 1);
    Some((start, end))
}

fn noised_last4<R: RngCore + CryptoRng + ?Sized>(
    digits: &str,
    sensitivity: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<String, DpError> {
    let value: i64 = digits.parse().expect("ascii digits");
    let noisy = noise_integer(value, sensitivity, epsilon, 0, 9999, rng)?;
    Ok(format!("{noisy:04}"))
}

/// Keeps every character except the final 4-digit group, which is noised.
pub fn noise_phone<R: RngCore + CryptoRng + ?Sized>(
    phone: &str,
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<FieldNoise, DpError> {
    match last_digit_group(phone) {
        Some((s, e)) if e - s == 4 && e == phone.len() => {
            let tail = noised_last4(&phone[s..e], sensitivity, epsilon, rng)?;
            Ok(FieldNoise::laplace(format!("{}{tail}", &phone[..s]), epsilon))
        }
        _ => Ok(FieldNoise::redacted(redact(phone, Category::Phone))),
    }
}

/// Masks all digits but the last four with `X` and noises those four.
fn mask_and_noise_tail<R: RngCore + CryptoRng + ?Sized>(
    text: &str,
    category: Category,
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<FieldNoise, DpError> {
    let digits = text.bytes().filter(u8::is_ascii_digit).count();
    if digits < 4 || !text.as_bytes()[text.len() - 4..].iter().all(u8::is_ascii_digit) {
        return Ok(FieldNoise::redacted(redact(text, category)));
    }
    let head: String = text[..text.len() - 4].chars().map(|c| if c.is_ascii_digit() { 'X' } else { c }).collect();
    let tail = noised_last4(&text[text.len() - 4..], sensitivity, epsilon, rng)?;
    Ok(FieldNoise::laplace(head + &tail, epsilon))
}

/// `4532-1234-5678-9010` becomes `XXXX-XXXX-XXXX-` plus four noised digits.
pub fn noise_credit_card<R: RngCore + CryptoRng + ?Sized>(
    ccn: &str,
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<FieldNoise, DpError> {
    mask_and_noise_tail(ccn, Category::CreditCard, epsilon, sensitivity, rng)
}

/// `123-45-6789` becomes `XXX-XX-` plus four noised digits.
pub fn noise_ssn<R: RngCore + CryptoRng + ?Sized>(
    ssn: &str,
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<FieldNoise, DpError> {
    mask_and_noise_tail(ssn, Category::Ssn, epsilon, sensitivity, rng)
}

/// Noises the five-digit code; a ZIP+4 suffix is masked.
pub fn noise_zip<R: RngCore + CryptoRng + ?Sized>(
    zip: &str,
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<FieldNoise, DpError> {
    let Some(code) = zip.get(..5).filter(|c| c.bytes().all(|b| b.is_ascii_digit())) else {
        return Ok(FieldNoise::redacted(redact(zip, Category::Zip)));
    };
    let value: i64 = code.parse().expect("ascii digits");
    let noisy = noise_integer(value, sensitivity, epsilon, 0, 99_999, rng)?;
    let suffix: String = zip[5..].chars().map(|c| if c.is_ascii_digit() { 'X' } else { c }).collect();
    Ok(FieldNoise::laplace(format!("{noisy:05}{suffix}"), epsilon))
}

/// Replaces the local part of an email with one initial and one `*` per
/// remaining character; the domain is kept verbatim. The initial is
/// `linked_initial` (lowercased) when the owner has a session pseudonym,
/// else a uniformly random lowercase letter.
pub fn mask_email<R: RngCore + CryptoRng + ?Sized>(email: &str, linked_initial: Option<char>, rng: &mut R) -> String {
    let (local, domain) = match email.rfind('@') {
        Some(at) => (&email[..at], &email[at..]),
        None => (email, ""),
    };
    let initial = linked_initial
        .filter(char::is_ascii_alphabetic)
        .map(|c| c.to_ascii_lowercase())
        .unwrap_or_else(|| char::from(b'a' + rng.random_range(0..26u8)));
    let stars = local.chars().count().saturating_sub(1);
    let mut out = String::with_capacity(email.len());
    out.push(initial);
    out.extend(std::iter::repeat_n('*', stars));
    out.push_str(domain);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DateFormat {
    Iso,
    Us { padded: bool },
    Long { padded: bool },
}

fn parse_date(s: &str) -> Option<(NaiveDate, DateFormat)> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some((d, DateFormat::Iso));
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%m/%d/%Y") {
        let padded = s.starts_with('0') || s.split('/').nth(1).is_some_and(|p| p.starts_with('0'));
        return Some((d, DateFormat::Us { padded }));
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%B %d, %Y") {
        let padded = s.split(' ').nth(1).is_some_and(|p| p.starts_with('0'));
        return Some((d, DateFormat::Long { padded }));
    }
    None
}

fn render_date(d: NaiveDate, format: DateFormat) -> String {
    match format {
        DateFormat::Iso => d.format("%Y-%m-%d").to_string(),
        DateFormat::Us { padded: true } => d.format("%m/%d/%Y").to_string(),
        DateFormat::Us { padded: false } => d.format("%-m/%-d/%Y").to_string(),
        DateFormat::Long { padded: true } => d.format("%B %d, %Y").to_string(),
        DateFormat::Long { padded: false } => d.format("%B %-d, %Y").to_string(),
    }
}

/// Shifts a date by Laplace noise in days and re-renders it in its source
/// format. Years stay within 1000..=9999 so every format round-trips.
pub fn noise_date<R: RngCore + CryptoRng + ?Sized>(
    date: &str,
    epsilon: f64,
    sensitivity_days: f64,
    rng: &mut R,
) -> Result<FieldNoise, DpError> {
    let Some((d, format)) = parse_date(date) else {
        return Ok(FieldNoise::redacted(redact(date, Category::Date)));
    };
    let lo = NaiveDate::from_ymd_opt(1000, 1, 1).unwrap().num_days_from_ce() as i64;
    let hi = NaiveDate::from_ymd_opt(9999, 12, 31).unwrap().num_days_from_ce() as i64;
    let days = d.num_days_from_ce() as i64;
    if days < lo || days > hi {
        return Ok(FieldNoise::redacted(redact(date, Category::Date)));
    }
    let noisy = noise_integer(days, sensitivity_days, epsilon, lo, hi, rng)?;
    let shifted = NaiveDate::from_num_days_from_ce_opt(noisy as i32).expect("clamped to valid range");
    Ok(FieldNoise::laplace(render_date(shifted, format), epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use regex::Regex;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(0xfeed)
    }

    #[test]
    fn phone_keeps_prefix() {
        let mut rng = rng();
        let out = noise_phone("(555) 987-6543", 1.0, 100.0, &mut rng).unwrap();
        assert!(out.text.starts_with("(555) 987-"));
        assert_eq!(out.text.len(), "(555) 987-6543".len());
        assert_eq!(out.mechanism, Mechanism::Laplace);
        assert_eq!(out.epsilon_spent, 1.0);
        let same = noise_phone("(555) 987-6543", 1e12, 100.0, &mut rng).unwrap();
        assert_eq!(same.text, "(555) 987-6543");
    }

    #[test]
    fn phone_without_trailing_group_is_redacted() {
        let out = noise_phone("555-98", 1.0, 100.0, &mut rng()).unwrap();
        assert_eq!(out.text, "XXX-XX");
        assert_eq!(out.mechanism, Mechanism::Redact);
        assert_eq!(out.epsilon_spent, 0.0);
    }

    #[test]
    fn phone_format_is_preserved() {
        let re = Regex::new(r"^\(\d{3}\) \d{3}-\d{4}$").unwrap();
        let mut rng = rng();
        for _ in 0..1000 {
            let out = noise_phone("(555) 987-6543", 1.0, 100.0, &mut rng).unwrap();
            assert!(re.is_match(&out.text), "{}", out.text);
        }
    }

    #[test]
    fn credit_card_shapes() {
        let mut rng = rng();
        let re = Regex::new(r"^XXXX-XXXX-XXXX-\d{4}$").unwrap();
        let out = noise_credit_card("4532-1234-5678-9010", 1.0, 100.0, &mut rng).unwrap();
        assert!(re.is_match(&out.text), "{}", out.text);
        assert_eq!(
            noise_credit_card("4532-1234-5678-9010", 1e12, 100.0, &mut rng).unwrap().text,
            "XXXX-XXXX-XXXX-9010"
        );
        let spaced = noise_credit_card("4532 1234 5678 9010", 1.0, 100.0, &mut rng).unwrap();
        assert!(spaced.text.starts_with("XXXX XXXX XXXX "), "{}", spaced.text);
        assert_eq!(noise_credit_card("4532123456789010", 1e12, 100.0, &mut rng).unwrap().text, "XXXXXXXXXXXX9010");
    }

    #[test]
    fn ssn_and_zip() {
        let mut rng = rng();
        assert_eq!(noise_ssn("123-45-6789", 1e12, 100.0, &mut rng).unwrap().text, "XXX-XX-6789");
        assert_eq!(noise_zip("02139", 1e12, 10.0, &mut rng).unwrap().text, "02139");
        assert_eq!(noise_zip("02139-4307", 1e12, 10.0, &mut rng).unwrap().text, "02139-XXXX");
        let z = noise_zip("90210", 1.0, 10.0, &mut rng).unwrap().text;
        assert!(z.len() == 5 && z.bytes().all(|b| b.is_ascii_digit()));
    }

    #[test]
    fn email_masking() {
        let mut rng = rng();
        let out = mask_email("jessica.martinez@email.com", None, &mut rng);
        let re = Regex::new(r"^[a-z]\*{15}@email\.com$").unwrap();
        assert!(re.is_match(&out), "{out}");
        assert_eq!(mask_email("jessica.martinez@email.com", Some('M'), &mut rng), "m***************@email.com");
        let short = mask_email("a@b.co", None, &mut rng);
        assert!(Regex::new(r"^[a-z]@b\.co$").unwrap().is_match(&short), "{short}");
    }

    #[test]
    fn dates() {
        let mut rng = rng();
        for d in ["2024-03-15", "3/15/2024", "03/05/2024", "March 15, 2024", "March 05, 2024"] {
            assert_eq!(noise_date(d, 1e12, 30.0, &mut rng).unwrap().text, d);
        }
        let long = noise_date("March 15, 2024", 1.0, 30.0, &mut rng).unwrap().text;
        let re = Regex::new(
            r"^(January|February|March|April|May|June|July|August|September|October|November|December) \d{1,2}, \d{4}$",
        )
        .unwrap();
        assert!(re.is_match(&long), "{long}");
        let bad = noise_date("2024-13-45", 1.0, 30.0, &mut rng).unwrap();
        assert_eq!(bad.mechanism, Mechanism::Redact);
        assert_eq!(bad.text, "XXXX-XX-XX");
    }

    #[test]
    fn date_median_is_the_date() {
        // Median error of Lap(30) over N draws is ~30/sqrt(N) ~ 0.1 days.
        let mut rng = rng();
        let origin = NaiveDate::from_ymd_opt(2024, 3, 15).unwrap();
        let mut offsets: Vec<i64> = (0..100_000)
            .map(|_| {
                let t = noise_date("2024-03-15", 1.0, 30.0, &mut rng).unwrap().text;
                (NaiveDate::parse_from_str(&t, "%Y-%m-%d").unwrap() - origin).num_days()
            })
            .collect();
        offsets.sort_unstable();
        assert!(offsets[offsets.len() / 2].abs() <= 2);
    }

    #[test]
    fn redaction_is_category_generic() {
        assert_eq!(redact("(555) 987-6543", Category::Phone), "(XXX) XXX-XXXX");
        assert_eq!(redact("Sarah", Category::Name), "[NAME]");
        assert_eq!(redact("Dallas", Category::City), "[CITY]");
    }

    proptest! {
        #[test]
        fn email_domain_is_never_altered(local in "[a-z0-9._]{1,20}", domain in "[a-z]{1,10}\\.(com|org|co\\.uk)", seed in any::<u64>()) {
            let email = format!("{local}@{domain}");
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let out = mask_email(&email, None, &mut rng);
            let expected_suffix = format!("@{domain}");
            prop_assert!(out.ends_with(&expected_suffix));
            prop_assert_eq!(out.chars().count(), email.chars().count());
        }

        #[test]
        fn structured_outputs_keep_their_grammar(
            a in 0u32..1000, b in 0u32..1000, c in 0u32..10_000,
            g in proptest::collection::vec(0u32..10_000, 4),
            sep in prop_oneof![Just('-'), Just(' ')],
            eps in 0.01f64..100.0, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let phone = format!("({a:03}) {b:03}-{c:04}");
            let out = noise_phone(&phone, eps, 100.0, &mut rng).unwrap().text;
            let phone_re = Regex::new(r"^\(\d{3}\) \d{3}-\d{4}$").unwrap();
            prop_assert!(phone_re.is_match(&out), "{}", out);
            prop_assert_eq!(&out[..10], &phone[..10]);

            let card = format!("{:04}{sep}{:04}{sep}{:04}{sep}{:04}", g[0], g[1], g[2], g[3]);
            let out = noise_credit_card(&card, eps, 100.0, &mut rng).unwrap().text;
            let re = Regex::new(&format!(r"^XXXX{sep}XXXX{sep}XXXX{sep}\d{{4}}$")).unwrap();
            prop_assert!(re.is_match(&out), "{}", out);

            let date = format!("20{:02}-{:02}-{:02}", a % 100, 1 + b % 12, 1 + c % 28);
            let out = noise_date(&date, eps, 30.0, &mut rng).unwrap();
            prop_assert_eq!(out.mechanism, Mechanism::Laplace);
            prop_assert!(NaiveDate::parse_from_str(&out.text, "%Y-%m-%d").is_ok());
        }
    }
}
