use charm_core::signal::{generate_synthetic, SynthSpec};
use rustfft::{num_complex::Complex, FftPlanner};

fn spectrum(row: &[f32]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[..row.len() / 2].iter().map(|c| c.norm_sqr()).collect()
}

#[test]
fn channel_spectra_peak_at_signature_frequency() {
    let spec = SynthSpec { recordings_per_class: 3, ..SynthSpec::synth_a() };
    let ds = generate_synthetic(&spec).unwrap();
    let bin_hz = spec.sample_rate / spec.samples as f64;
    for rec in &ds.recordings {
        let ids = rec.channel_ids.as_ref().unwrap();
        for (row, &id) in ids.iter().enumerate() {
            let power = spectrum(rec.signal.row(row));
            let peak = (1..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
            let expected = spec.carrier_hz(id) / bin_hz;
            assert!((peak as f64 - expected).abs() <= 1.0, "channel {id}: peak bin {peak}, expected {expected}");
        }
    }
}

/// Nearest-centroid classifier over log power per known channel id.
#[test]
fn band_power_probe_separates_classes() {
    let spec = SynthSpec::synth_a();
    let ds = generate_synthetic(&spec).unwrap();
    let features: Vec<Vec<f64>> = ds
        .recordings
        .iter()
        .map(|r| {
            let mut f = vec![0.0; spec.montage_size];
            for (row, &id) in r.channel_ids.as_ref().unwrap().iter().enumerate() {
                let x = r.signal.row(row);
                f[id] = (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).ln();
            }
            f
        })
        .collect();
    let labels = ds.labels();
    let (train, test): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|i| i % 2 == 0);
    let mut centroids = vec![vec![0.0; spec.montage_size]; spec.class_count];
    let mut counts = vec![0.0; spec.class_count];
    for &i in &train {
        counts[labels[i]] += 1.0;
        for (c, v) in centroids[labels[i]].iter_mut().zip(&features[i]) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let correct = test
        .iter()
        .filter(|&&i| {
            let pred = (0..spec.class_count).min_by(|&a, &b| dist(&features[i], &centroids[a]).total_cmp(&dist(&features[i], &centroids[b]))).unwrap();
            pred == labels[i]
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "probe accuracy {acc}");
}
