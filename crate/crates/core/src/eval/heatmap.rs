use std::fmt::Write;

use crate::attribution::AttributionRecord;
use crate::corpus::Instance;
use crate::error::{Error, Result};

/// Opacity used for every token when an instance's scores are all equal.
pub const UNIFORM_OPACITY: f64 = 0.5;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Min-max rescaled opacities of the normalized scores.
pub(crate) fn opacities(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![UNIFORM_OPACITY; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// One inline-styled span per token, shaded by its rescaled attribution.
pub fn render_heatmap(instance: &Instance, record: &AttributionRecord) -> Result<String> {
    if record.instance_id != instance.id {
        return Err(Error::InvalidRequest(format!(
            "record {:?} does not belong to instance {:?}",
            record.instance_id, instance.id
        )));
    }
    let scores = if record.normalized_scores.is_empty() { &record.raw_scores } else { &record.normalized_scores };
    if scores.len() != instance.tokens.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores for {} tokens in {:?}",
            scores.len(),
            instance.tokens.len(),
            instance.id
        )));
    }
    let mut html = format!(
        "<div class=\"heatmap\" data-instance=\"{}\" data-method=\"{}\" data-target=\"{}\">",
        escape(&instance.id),
        record.method,
        record.target_class
    );
    for (i, ((tok, op), raw)) in instance.tokens.iter().zip(opacities(scores)).zip(&record.raw_scores).enumerate() {
        if i > 0 {
            html.push(' ');
        }
        write!(
            html,
            "<span style=\"background-color: rgba(220, 38, 38, {op:.4})\" title=\"{raw:.6}\">{}</span>",
            escape(tok)
        )
        .expect("writing to a String cannot fail");
    }
    html.push_str("</div>");
    Ok(html)
}

/// Wraps fragments in a standalone HTML document.
pub fn heatmap_page(title: &str, fragments: &[String]) -> String {
    let mut page = format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n\
         <style>body {{ font-family: sans-serif; line-height: 2; }} .heatmap {{ margin: 0.5em 0; }} \
         .heatmap span {{ padding: 0.1em 0.2em; border-radius: 3px; }}</style>\n</head>\n<body>\n<h1>{}</h1>\n",
        escape(title),
        escape(title)
    );
    for f in fragments {
        page.push_str(f);
        page.push('\n');
    }
    page.push_str("</body>\n</html>\n");
    page
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{normalize_local, AttributionMethod};
    use crate::corpus::Label;

    fn pair(tokens: &[&str], raw: &[f64]) -> (Instance, AttributionRecord) {
        let inst = Instance::new("x1", tokens.iter().map(|s| s.to_string()).collect(), Label::Hate);
        let rec = normalize_local(AttributionRecord {
            instance_id: "x1".into(),
            method: AttributionMethod::IntegratedGradients,
            target_class: Label::Hate,
            tokens: inst.tokens.clone(),
            raw_scores: raw.to_vec(),
            normalized_scores: vec![],
        })
        .unwrap();
        (inst, rec)
    }

    #[test]
    fn endpoints_and_uniform() {
        let (i, r) = pair(&["a", "b", "c"], &[-1.0, 3.0, 0.5]);
        let html = render_heatmap(&i, &r).unwrap();
        assert!(html.contains("rgba(220, 38, 38, 0.0000)\" title=\"-1.000000\">a<"));
        assert!(html.contains("rgba(220, 38, 38, 1.0000)\" title=\"3.000000\">b<"));
        let (i, r) = pair(&["a", "b"], &[2.0, 2.0]);
        let html = render_heatmap(&i, &r).unwrap();
        assert_eq!(html.matches("0.5000)").count(), 2);
    }

    #[test]
    fn escapes_and_is_deterministic() {
        let (i, r) = pair(&["<b>", "&"], &[0.0, 1.0]);
        let a = render_heatmap(&i, &r).unwrap();
        assert!(a.contains("&lt;b&gt;") && a.contains("&amp;"));
        assert_eq!(a, render_heatmap(&i, &r).unwrap());
        let page = heatmap_page("t & u", &[a]);
        assert!(page.starts_with("<!DOCTYPE html>") && page.contains("t &amp; u"));
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let (i, mut r) = pair(&["a", "b"], &[0.0, 1.0]);
        r.normalized_scores.pop();
        assert!(matches!(render_heatmap(&i, &r), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn order_is_preserved() {
        let raw = [0.3, -0.2, 1.7, 0.9, -3.0];
        let (_, r) = pair(&["a", "b", "c", "d", "e"], &raw);
        let op = opacities(&r.normalized_scores);
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] > raw[j] {
                    assert!(op[i] >= op[j]);
                }
            }
        }
    }
}
