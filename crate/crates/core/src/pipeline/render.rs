use std::sync::OnceLock;

use regex::{Captures, Regex};
use thiserror::Error;

use crate::graph::{FieldMap, FieldValue};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("template placeholder `{{{{{0}}}}}` has no value")]
pub struct MissingField(pub String);

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").expect("valid pattern"))
}

/// Field names referenced by `template`, in order of appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    placeholder()
        .captures_iter(template)
        .map(|c| c[1].to_string())
        .collect()
}

/// Substitutes every `{{field}}`; all other bytes pass through unchanged.
pub fn render_template(template: &str, context: &FieldMap) -> Result<String, MissingField> {
    if let Some(missing) = placeholders(template)
        .into_iter()
        .find(|f| !context.contains_key(f))
    {
        return Err(MissingField(missing));
    }
    Ok(placeholder()
        .replace_all(template, |c: &Captures| format_value(&context[&c[1]]))
        .into_owned())
}

pub fn format_value(v: &FieldValue) -> String {
    match v {
        FieldValue::Text(s) => s.clone(),
        FieldValue::Number(x) if x.fract() == 0.0 && x.abs() < 9.0e15 => group_thousands(*x as i64),
        FieldValue::Number(x) => x.to_string(),
    }
}

fn group_thousands(n: i64) -> String {
    let digits = n.unsigned_abs().to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3 + 1);
    if n < 0 {
        out.push('-');
    }
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(pairs: &[(&str, FieldValue)]) -> FieldMap {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn steps_example() {
        let t = "Great job walking {{avg_daily_steps}} daily steps last week! Keep it up.";
        let out = render_template(t, &ctx(&[("avg_daily_steps", 8356.0.into())])).unwrap();
        assert_eq!(out, "Great job walking 8,356 daily steps last week! Keep it up.");
    }

    #[test]
    fn grouping() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000), "1,000");
        assert_eq!(group_thousands(1234567), "1,234,567");
        assert_eq!(group_thousands(-12000), "-12,000");
        assert_eq!(format_value(&7.5.into()), "7.5");
    }

    #[test]
    fn no_placeholders_is_identity() {
        let t = "Stand up { and } stretch {{ }} ☀";
        assert_eq!(render_template(t, &FieldMap::new()).unwrap(), t);
    }

    #[test]
    fn repeated_field_substituted_identically() {
        let out = render_template("{{x}}/{{ x }}", &ctx(&[("x", "ok".into())])).unwrap();
        assert_eq!(out, "ok/ok");
    }

    #[test]
    fn missing_field_named() {
        let err = render_template("Hi {{name_of_goal}}", &FieldMap::new()).unwrap_err();
        assert_eq!(err, MissingField("name_of_goal".into()));
        assert!(err.to_string().contains("name_of_goal"));
    }
}
