//! The CORD-directory dependence pipeline end to end on synthesized
//! annotations: import, series extraction, fits, classes, and grouping.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fieldvqa::dataset::import_cord;
use fieldvqa::dependence::{
    classify, dependence_matrix, extract_numeric_series, fit_linear, recommend_groups,
    DependenceClass, TripletSpec,
};

/// Renders 1346000 as "1.346.000" the way grouped receipts print amounts.
fn grouped(value: i64) -> String {
    let digits = value.to_string();
    let bytes = digits.as_bytes();
    let mut parts = Vec::new();
    let mut idx = bytes.len();
    while idx > 3 {
        parts.push(String::from_utf8_lossy(&bytes[idx - 3..idx]).into_owned());
        idx -= 3;
    }
    parts.push(String::from_utf8_lossy(&bytes[..idx]).into_owned());
    parts.reverse();
    parts.join(".")
}

/// Writes a CORD-style annotation directory: per-receipt JSON files with
/// nested sub_total/total groups plus sibling images. A slice of documents
/// omits cash/change so triplet sample counts differ per triplet.
fn write_cord_dir(dir: &Path, n: usize, seed: u64) {
    let image_dir = dir.join("image");
    fs::create_dir_all(&image_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let subtotal = rng.gen_range(100_000i64..200_000);
        let rate = rng.gen_range(0.01f64..0.9);
        let tax = (subtotal as f64 * rate) as i64;
        let total = subtotal + tax;
        let change = rng.gen_range(0i64..total);
        let cash = total + change;
        let menu = rng.gen_range(1i64..9);
        let mut total_group = serde_json::json!({
            "total_price": grouped(total),
            "menutype_cnt": menu.to_string(),
        });
        // One document in five carries no cash payment.
        if i % 5 != 0 {
            total_group["cashprice"] = serde_json::Value::String(grouped(cash));
            total_group["changeprice"] = serde_json::Value::String(grouped(change));
        }
        let annotation = serde_json::json!({
            "gt_parse": {
                "sub_total": {
                    "subtotal_price": grouped(subtotal),
                    "tax_price": grouped(tax),
                },
                "total": total_group,
            }
        });
        let stem = format!("receipt_{i:05}");
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string(&annotation).unwrap(),
        )
        .unwrap();
        fs::write(image_dir.join(format!("{stem}.png")), "png").unwrap();
    }
}

#[test]
fn imported_annotations_reproduce_dependence_structure() {
    let dir = tempfile::tempdir().unwrap();
    write_cord_dir(dir.path(), 150, 77);
    let bundle = import_cord(dir.path()).unwrap();
    assert_eq!(bundle.documents.len(), 150);

    // Sum identities: tax = total - subtotal on every receipt.
    let tax = TripletSpec::new("tax", "subtotal", "total").unwrap();
    let series = extract_numeric_series(&bundle, &tax).unwrap();
    assert_eq!(series.len(), 150);
    let fit = fit_linear(&series).unwrap();
    assert!(fit.r_squared.unwrap() > 0.99);
    assert_eq!(classify(&fit).unwrap(), DependenceClass::High);

    // cash = total + change, only on documents that carry a cash payment.
    let cash = TripletSpec::new("cash", "total", "change").unwrap();
    let series = extract_numeric_series(&bundle, &cash).unwrap();
    assert_eq!(series.len(), 120);
    let fit = fit_linear(&series).unwrap();
    assert!(fit.r_squared.unwrap() > 0.99);

    // Unrelated predictors stay far from the high band.
    let unrelated = TripletSpec::new("tax", "change", "menu_count").unwrap();
    let fit = fit_linear(&extract_numeric_series(&bundle, &unrelated).unwrap()).unwrap();
    assert!(fit.r_squared.unwrap() < 0.9);

    // The full sweep groups the money identities together and leaves the
    // menu counter alone.
    let targets: Vec<String> = ["subtotal", "tax", "total", "cash", "change", "menu_count"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let matrix = dependence_matrix(&bundle, &targets).unwrap();
    let groups = recommend_groups(&matrix, 0.9);
    let money = groups
        .iter()
        .find(|g| g.contains(&"tax".to_string()))
        .expect("money group");
    for field in ["subtotal", "total", "cash", "change"] {
        assert!(money.contains(&field.to_string()), "{field} not grouped");
    }
    assert!(groups.iter().any(|g| g == &vec!["menu_count".to_string()]));
}
