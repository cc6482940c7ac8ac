use std::fmt::Write as _;

use super::xml::escape;
use crate::ablation::TrivialityReport;

const WIDTH: f64 = 760.0;
const PANEL: f64 = 300.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const PLOT: f64 = 180.0;

/// Bar chart of the ablated metric per position with a dashed baseline rule,
/// one panel per report stacked vertically.
pub fn render_svg(reports: &[&TrivialityReport]) -> String {
    let height = PANEL * reports.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{height}" fill="white"/>"#);
    for (i, r) in reports.iter().enumerate() {
        panel(&mut s, r, i as f64 * PANEL);
    }
    s.push_str("</svg>\n");
    s
}

fn panel(s: &mut String, r: &TrivialityReport, y0: f64) {
    let metric = serde_json::to_value(r.metric).expect("unit enum");
    let metric = metric.as_str().unwrap_or_default();
    let base_y = y0 + TOP + PLOT;
    let y_of = |v: f64| base_y - v.clamp(0.0, 1.0) * PLOT;
    let _ = writeln!(s, r#"<g class="panel" data-protocol="{}">"#, r.protocol);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.1}" font-size="13" font-weight="bold">{}: {} after zeroing (model {})</text>"#,
        y0 + 20.0,
        r.protocol.as_str().to_uppercase(),
        escape(metric),
        escape(&r.fingerprint)
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            WIDTH - RIGHT,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let n = r.results.len().max(1) as f64;
    let slot = (WIDTH - LEFT - RIGHT) / n;
    let bar = (slot * 0.7).min(48.0);
    for (i, res) in r.results.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let top = y_of(res.ablated);
        let fill = if res.noop {
            "#bbb"
        } else if res.trivial {
            "#7a9cc6"
        } else {
            "#b5413b"
        };
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{top:.1}" width="{bar:.1}" height="{:.1}" fill="{fill}"><title>{}: {:.4}</title></rect>"#,
            cx - bar / 2.0,
            base_y - top,
            escape(&res.label),
            res.ablated
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({cx:.1},{:.1}) rotate(-40)" text-anchor="end">{}</text>"#,
            base_y + 12.0,
            escape(&res.label)
        );
    }
    let by = y_of(r.baseline);
    let _ = writeln!(
        s,
        r##"<line class="baseline" x1="{LEFT}" y1="{by:.1}" x2="{:.1}" y2="{by:.1}" stroke="#222" stroke-dasharray="6 4"/>"##,
        WIDTH - RIGHT
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">baseline {:.4}</text>"#,
        WIDTH - RIGHT,
        by - 4.0,
        r.baseline
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{base_y:.1}" x2="{:.1}" y2="{base_y:.1}" stroke="black"/>"#,
        WIDTH - RIGHT
    );
    s.push_str("</g>\n");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::tests::e3_report;
    use crate::report::xml::parse_xml;

    #[test]
    fn well_formed_with_one_bar_per_result() {
        let a = e3_report(&[0.28, 0.33, 0.16]);
        let b = e3_report(&[0.84, 0.5, 0.0]);
        let svg = render_svg(&[&a, &b]);
        let root = parse_xml(&svg).unwrap();
        assert_eq!(root.name, "svg");
        let bars = root
            .descendants()
            .into_iter()
            .filter(|e| e.name == "rect" && e.children.iter().any(|c| matches!(c, crate::report::xml::XmlNode::Element(t) if t.name == "title")))
            .count();
        assert_eq!(bars, 6);
        let rules = root.descendants().into_iter().filter(|e| e.attr("class") == Some("baseline")).count();
        assert_eq!(rules, 2);
    }
}
