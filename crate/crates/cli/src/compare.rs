use anyhow::{bail, Context, Result};
use lfis_core::lfis::LEVEL_TOLERANCE;
use lfis_core::oracle::{total_variation, EnergyLevel};
use serde_json::{json, Map, Value};

fn field<'a>(v: &'a Value, key: &str, which: &str) -> Result<&'a Value> {
    v.get(key).with_context(|| format!("{which} summary has no `{key}` field"))
}

fn levels(result: &Value) -> Result<Option<Vec<EnergyLevel>>> {
    match result.get("levels") {
        Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
        None => Ok(None),
    }
}

fn number(v: &Value, path: &str) -> Option<f64> {
    v.pointer(path).and_then(Value::as_f64)
}

/// Joins two run summaries on inverse temperature.
///
/// For each shared `beta` the report holds the error and `log Z` columns
/// of both runs with their difference, the mean energies with the
/// likelihood ratio `exp(-beta (E_a - E_b))` of an average `a` state over an
/// average `b` state, and, when both carry energy levels, the
/// total-variation distance between the listed levels together with both
/// histograms. Mass lumped into residuals is unplaced, so
/// `total_variation_bound` adds half of both residuals.
pub fn compare(a: &Value, b: &Value) -> Result<Value> {
    let method_a = field(a, "method", "first")?.as_str().context("method is not a string")?;
    let method_b = field(b, "method", "second")?.as_str().context("method is not a string")?;
    let ra = field(a, "results", "first")?.as_array().context("results is not an array")?;
    let rb = field(b, "results", "second")?.as_array().context("results is not an array")?;
    if a.get("model_digest") != b.get("model_digest") {
        bail!("the two summaries were produced on different models");
    }
    let mut rows = Vec::new();
    for x in ra {
        let beta = number(x, "/beta").context("result without beta")?;
        let Some(y) = rb.iter().find(|y| number(y, "/beta") == Some(beta)) else {
            continue;
        };
        let mut row = Map::new();
        row.insert("beta".into(), json!(beta));
        for (name, path) in [
            ("abs_error_mean", "/abs_error/mean"),
            ("abs_error_median", "/abs_error/median"),
            ("abs_error_variance", "/abs_error/variance"),
            ("log_Z_hat_mean", "/log_Z_hat/mean"),
            ("energy_mean", "/energy/mean"),
            ("energy_variance", "/energy/variance"),
        ] {
            let (va, vb) = (number(x, path), number(y, path));
            if va.is_none() && vb.is_none() {
                continue;
            }
            let mut cell = Map::new();
            cell.insert(method_a.into(), json!(va));
            cell.insert(format!("{method_b}_b"), json!(vb));
            if let (Some(p), Some(q)) = (va, vb) {
                cell.insert("delta".into(), json!(p - q));
            }
            row.insert(name.into(), Value::Object(cell));
        }
        if let (Some(ea), Some(eb)) = (number(x, "/energy/mean"), number(y, "/energy/mean")) {
            let log_ratio = -beta * (ea - eb);
            row.insert("log_likelihood_ratio".into(), json!(log_ratio));
            row.insert("log10_likelihood_ratio".into(), json!(log_ratio / std::f64::consts::LN_10));
            let ratio = log_ratio.exp();
            row.insert("likelihood_ratio".into(), if ratio.is_finite() { json!(ratio) } else { Value::Null });
        }
        if let (Some(la), Some(lb)) = (levels(x)?, levels(y)?) {
            let (ra, rb) = (number(x, "/residual_mass").unwrap_or(0.0), number(y, "/residual_mass").unwrap_or(0.0));
            let tv = total_variation(&la, &lb, LEVEL_TOLERANCE);
            row.insert("total_variation".into(), json!(tv));
            row.insert("total_variation_bound".into(), json!(tv + 0.5 * (ra + rb)));
            row.insert("residual_mass_a".into(), json!(ra));
            row.insert("residual_mass_b".into(), json!(rb));
            row.insert("levels_a".into(), json!(la));
            row.insert("levels_b".into(), json!(lb));
        }
        rows.push(Value::Object(row));
    }
    if rows.is_empty() {
        bail!("the summaries share no inverse temperature");
    }
    Ok(json!({
        "a": method_a,
        "b": method_b,
        "model_digest": a.get("model_digest"),
        "rows": rows,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(method: &str, energy: f64) -> Value {
        json!({
            "method": method,
            "model_digest": "d",
            "results": [{
                "beta": 20.0,
                "energy": {"mean": energy, "variance": 1.0, "median": energy},
                "abs_error": {"mean": 0.1, "variance": 0.0, "median": 0.1},
                "levels": [{"energy": -1.0, "mass": 0.25}, {"energy": 0.0, "mass": 0.75}],
            }]
        })
    }

    #[test]
    fn identical_inputs_compare_to_zero() {
        let a = summary("lfis", -3.0);
        let r = compare(&a, &a).unwrap();
        let row = &r["rows"][0];
        assert_eq!(row["abs_error_mean"]["delta"], json!(0.0));
        assert_eq!(row["energy_mean"]["delta"], json!(0.0));
        assert_eq!(row["total_variation"], json!(0.0));
        assert_eq!(row["likelihood_ratio"], json!(1.0));
    }

    #[test]
    fn likelihood_ratio_of_mean_energies() {
        let r = compare(&summary("lfqgs", -401.52), &summary("eda", -393.54)).unwrap();
        let log10 = r["rows"][0]["log10_likelihood_ratio"].as_f64().unwrap();
        assert!((log10 - 20.0 * 7.98 / std::f64::consts::LN_10).abs() < 1e-9);
        assert!((log10 - 69.3).abs() < 0.1);
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        assert!(compare(&json!({"method": "x"}), &summary("y", 0.0)).is_err());
        let mut other = summary("y", 0.0);
        other["model_digest"] = json!("e");
        assert!(compare(&summary("x", 0.0), &other).is_err());
    }
}
