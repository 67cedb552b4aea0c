//! Acceptance criteria 1 to 13. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing the harness capture) before asserting.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;
use tunnelsim::anonymity::{
    estimate_joint_from_samples, fano_lower_bound, length_leakage_demo, plugin_mi, uniform_fano, JointDistribution,
};
use tunnelsim::crypto::{peel, seal_end_to_end, wrap, RoutingInstruction, MAX_ROUTE_LEN};
use tunnelsim::experiment::{exp1_kmeans, exp2_binary, exp3_multiclass, exp4_shift};
use tunnelsim::learn::{cnn_evaluate, cnn_train, elbow_ratio, elbow_scan, gradient_check, kmeans_fit, CnnArch, Normalization};
use tunnelsim::trace::pcap::import_pcap;
use tunnelsim::trace::tcp_flags::{ACK, FIN, PSH, SYN};
use tunnelsim::trace::{annotate_tcp, byte_entropy, curate, Annotations, Provenance};
use tunnelsim::{
    run_experiment, CnnModel, Dataset, ExperimentId, ExperimentSpec, FeatureVariant, Hyper, KeyPair, KeyPurpose, OnionMode,
    Protocol, SimConfig, Trace, TraceError, TraceRecord,
};
use tunnelsim::netdb::Pseudonym;

const ONION_CASES: usize = 1000;
const ONION_MAX_CORE: usize = 900;
const LEAK_NAIVE: f64 = 1.585;
const LEAK_NAIVE_TOL: f64 = 0.05;
const LEAK_PADDED_MAX: f64 = 0.01;
const FANO_1024: f64 = 0.90013;
const FANO_TOL: f64 = 1e-4;
const FANO_TRIPLES: usize = 1000;
const MI_ORACLE: f64 = 0.31128;
const MI_TOL: f64 = 1e-5;
const MI_INDEPENDENT_MAX: f64 = 1e-12;
const MI_SAMPLED_MAX: f64 = 0.05;
const UNIFORM_ENTROPY_MIN: f64 = 7.7;
const CAPTURE_ENTROPY_MIN: f64 = 7.5;
const WCSS_TOL: f64 = 1e-9;
const ELBOW_BLOB_MIN: f64 = 3.0;
const GRAD_REL_MAX: f64 = 1e-4;
const OVERFIT_EPOCHS: usize = 200;
const EXP2_VAL_MIN: f64 = 0.95;
const EXP4_DROP_MIN: f64 = 0.10;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("{} criterion {n:>2} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn criterion_01_onion_correctness_and_hop_knowledge() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = Vec::new();
    for case in 0..ONION_CASES {
        let n = rng.random_range(1..=MAX_ROUTE_LEN);
        let mode = if rng.random_bool(0.5) { OnionMode::Naive } else { OnionMode::padded() };
        // Sender and recipient sit outside the relay route; the recipient is
        // only named inside the end-to-end sealed core.
        let sender = Ipv4Addr::new(10, 9, rng.random(), rng.random());
        let recipient = Ipv4Addr::new(10, 7, rng.random(), rng.random());
        let e2e = KeyPair::generate(KeyPurpose::EndToEnd, &mut rng);
        let pseudonym = Pseudonym::derive(&e2e.public_key);
        let hops: Vec<(KeyPair, Ipv4Addr)> = (0..n)
            .map(|i| (KeyPair::generate(KeyPurpose::Routing, &mut rng), Ipv4Addr::new(10, 8, case as u8, i as u8 + 1)))
            .collect();
        let route: Vec<_> = hops.iter().map(|(k, a)| (k.public_key, *a)).collect();

        let mut request = format!("to={recipient} via={pseudonym} from={sender};").into_bytes();
        let body = rng.random_range(0..=400);
        request.extend((0..body).map(|_| rng.random::<u8>()));
        let sealed = seal_end_to_end(&e2e.public_key, &request, &mut rng).unwrap();
        let capacity = mode.core_capacity(n).unwrap_or(ONION_MAX_CORE).min(ONION_MAX_CORE);
        let core = if sealed.len() <= capacity {
            sealed
        } else {
            let mut c = vec![0u8; rng.random_range(0..=capacity)];
            rng.fill_bytes(&mut c);
            c
        };

        let forbidden: Vec<Vec<u8>> = vec![
            sender.to_string().into_bytes(),
            recipient.to_string().into_bytes(),
            sender.octets().to_vec(),
            recipient.octets().to_vec(),
            pseudonym.as_str().as_bytes().to_vec(),
        ];
        let mut msg = wrap(&route, &core, mode, &mut rng).unwrap();
        let mut seen = Vec::new();
        let mut delivered = None;
        for (i, (kp, _)) in hops.iter().enumerate() {
            let hop = i + 1;
            match peel(&kp.private_key, &msg) {
                Ok(RoutingInstruction::Forward { next_hop, inner }) => {
                    if hop > 1 && hop < n {
                        let mut plain = next_hop.to_string().into_bytes();
                        plain.extend_from_slice(&inner.blob);
                        if forbidden.iter().any(|f| contains(&plain, f)) {
                            failures.push(format!("case {case}: hop {hop} sees an endpoint"));
                        }
                    }
                    seen.push(next_hop);
                    msg = inner;
                }
                Ok(RoutingInstruction::Deliver { core }) => {
                    if hop != n {
                        failures.push(format!("case {case}: delivered early at hop {hop}"));
                    }
                    delivered = Some(core);
                    break;
                }
                Err(e) => {
                    failures.push(format!("case {case}: hop {hop}: {e}"));
                    break;
                }
            }
        }
        let expected: Vec<Ipv4Addr> = route[1..].iter().map(|r| r.1).collect();
        if seen != expected || delivered.as_deref() != Some(&core[..]) {
            failures.push(format!("case {case}: chain mismatch"));
        }
    }
    verdict(
        1,
        "onion peel chain and hop knowledge",
        failures.is_empty(),
        &format!("{ONION_CASES} cases, {} failures {:?}", failures.len(), failures.first()),
    );
}

#[test]
fn criterion_02_length_leakage() {
    let leak = length_leakage_demo(&SimConfig::default(), &[1, 2, 3], 200).unwrap();
    let pass = (leak.mi_naive - LEAK_NAIVE).abs() <= LEAK_NAIVE_TOL && leak.mi_padded <= LEAK_PADDED_MAX;
    verdict(
        2,
        "route-length leakage",
        pass,
        &format!("naive {:.4} bits, padded {:.4} bits over {} sends", leak.mi_naive, leak.mi_padded, leak.samples),
    );
}

#[test]
fn criterion_03_fano() {
    let pe = fano_lower_bound(10.0, 0.0, 1023).unwrap().lower_bound_pe;
    let uniform = uniform_fano(1024).unwrap().lower_bound_pe;
    let oracle = (10.0 - 0.0 - 1.0) / 1023f64.log2();
    let mut ok = (pe - FANO_1024).abs() <= FANO_TOL && pe == uniform && (pe - oracle).abs() < 1e-15;

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut violations = 0;
    for _ in 0..FANO_TRIPLES {
        let h = rng.random_range(0.0..20.0);
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (i1, i2) = (h * a.min(b), h * a.max(b));
        let (n, m) = (rng.random_range(2..5000usize), rng.random_range(2..5000usize));
        let (s1, s2) = (n.min(m), n.max(m));
        let lo = fano_lower_bound(h, i1, s1).unwrap();
        if fano_lower_bound(h, i2, s1).unwrap().lower_bound_pe > lo.lower_bound_pe + 1e-12 {
            violations += 1;
        }
        if fano_lower_bound(h, i1, s2).unwrap().lower_bound_pe > lo.lower_bound_pe + 1e-12 {
            violations += 1;
        }
    }
    let degenerate = fano_lower_bound(1.0, 0.0, 1).is_err() && fano_lower_bound(1.0, 0.0, 0).is_err();
    ok &= violations == 0 && degenerate;
    verdict(
        3,
        "Fano bound",
        ok,
        &format!("Pe(10, 0, 1023) = {pe:.6}, {violations} monotonicity violations in {FANO_TRIPLES} triples, |set|=1 rejected: {degenerate}"),
    );
}

#[test]
fn criterion_04_mutual_information() {
    let matrix = vec![vec![0.25, 0.25], vec![0.0, 0.5]];
    let joint = JointDistribution::new(vec![0u8, 1], vec![0u8, 1], matrix.clone()).unwrap();
    let mi = plugin_mi(&joint);
    // Direct sum over the four cells.
    let px = [0.5, 0.5];
    let py = [0.25, 0.75];
    let mut oracle = 0.0;
    for (x, row) in matrix.iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                oracle += p * (p / (px[x] * py[y])).log2();
            }
        }
    }
    let independent = plugin_mi(&joint.product_of_marginals());

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let pairs: Vec<(u8, u8)> = (0..10_000).map(|_| (rng.random_range(0..2), rng.random_range(0..2))).collect();
    let sampled = plugin_mi(&estimate_joint_from_samples(&pairs).unwrap());

    let pass = (mi - MI_ORACLE).abs() <= MI_TOL
        && (mi - oracle).abs() <= 1e-12
        && independent <= MI_INDEPENDENT_MAX
        && sampled <= MI_SAMPLED_MAX;
    verdict(
        4,
        "mutual information",
        pass,
        &format!("MI {mi:.6} (direct {oracle:.6}), independent {independent:e}, 10k draws {sampled:.5}"),
    );
}

fn record(frame: u64, seq: u32, ack: u32, flags: u8, payload: &[u8]) -> TraceRecord {
    TraceRecord {
        timestamp: frame as f64 * 0.01,
        frame_num: frame,
        old_frame_num: frame,
        src_ip: Ipv4Addr::new(192, 168, 1, 5),
        dst_ip: Ipv4Addr::new(192, 168, 1, 9),
        src_port: 40000,
        dst_port: 8443,
        protocol: Protocol::Tcp,
        ip_len: (40 + payload.len()) as u16,
        ip_ttl: 64,
        ip_id: frame as u16,
        tcp_seq: seq,
        tcp_ack: ack,
        tcp_flags: flags,
        tcp_window: 1024,
        tcp_dataofs: 5,
        payload_size: payload.len(),
        payload: payload.to_vec(),
        annotations: Annotations::default(),
        ground_truth_class: None,
    }
}

#[test]
fn criterion_05_curation() {
    let data = [7u8; 100];
    let mut records = vec![
        record(1, 0, 0, SYN, &[]),
        record(2, 1, 1, ACK | PSH, &data),
        record(3, 101, 1, ACK | PSH, &data),
        record(4, 1, 1, ACK | PSH, &data),
        record(5, 201, 1, ACK | PSH, &data),
        record(6, 0, 900, ACK, &[]),
        record(7, 0, 900, ACK, &[]),
        record(8, 101, 1, ACK | PSH, &data),
        record(9, 301, 1, ACK | PSH, &data),
        record(10, 401, 1, FIN | ACK, &[]),
    ];
    annotate_tcp(&mut records);
    let retrans = records.iter().filter(|r| r.annotations.retransmission).count();
    let dup = records.iter().filter(|r| r.annotations.duplicate_ack).count();
    let out = curate(&Trace::new(records, Provenance::PcapImport)).unwrap();
    let frames: Vec<u64> = out.records.iter().map(|r| r.frame_num).collect();
    let old: Vec<u64> = out.records.iter().map(|r| r.old_frame_num).collect();
    let pass = retrans == 2 && dup == 1 && frames == [1, 2, 3, 4] && old == [2, 3, 5, 9] && out.curation_applied;
    verdict(
        5,
        "curation filter",
        pass,
        &format!("{retrans} retransmissions, {dup} duplicate ACK flagged; kept frames {frames:?} (originally {old:?})"),
    );
}

#[test]
fn criterion_06_entropy() {
    let zero = byte_entropy(&[]);
    let constant = byte_entropy(&[0u8; 1100]);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut uniform = vec![0u8; 1100];
    rng.fill_bytes(&mut uniform);
    let h_uniform = byte_entropy(&uniform);

    let spec = ExperimentSpec::new(ExperimentId::Exp1KMeans);
    let (result, _) = exp1_kmeans(&spec).unwrap();
    let capture = result.capture.mean_entropy.unwrap_or(0.0);
    let pass = zero == 0.0 && constant == 0.0 && h_uniform >= UNIFORM_ENTROPY_MIN && capture >= CAPTURE_ENTROPY_MIN;
    verdict(
        6,
        "payload entropy",
        pass,
        &format!("empty {zero}, constant {constant}, uniform 1100 B {h_uniform:.4}, simulated capture mean {capture:.4}"),
    );
}

fn le16(v: u16) -> [u8; 2] {
    v.to_le_bytes()
}

fn le32(v: u32) -> [u8; 4] {
    v.to_le_bytes()
}

/// Ethernet + IPv4 + TCP/UDP frame, written field by field.
fn frame(proto: u8, src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16, ttl: u8, id: u16, tcp: (u32, u32, u8, u16), payload: &[u8]) -> Vec<u8> {
    let mut f = vec![0x02, 0, 0, 0, 0, 1, 0x02, 0, 0, 0, 0, 2, 0x08, 0x00];
    let l4_len = if proto == 6 { 20 } else { 8 } + payload.len();
    let total = (20 + l4_len) as u16;
    f.extend_from_slice(&[0x45, 0]);
    f.extend_from_slice(&total.to_be_bytes());
    f.extend_from_slice(&id.to_be_bytes());
    f.extend_from_slice(&[0x40, 0, ttl, proto, 0, 0]);
    f.extend_from_slice(&src);
    f.extend_from_slice(&dst);
    f.extend_from_slice(&sport.to_be_bytes());
    f.extend_from_slice(&dport.to_be_bytes());
    if proto == 6 {
        let (seq, ack, flags, win) = tcp;
        f.extend_from_slice(&seq.to_be_bytes());
        f.extend_from_slice(&ack.to_be_bytes());
        f.extend_from_slice(&[5 << 4, flags]);
        f.extend_from_slice(&win.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 0]);
    } else {
        f.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
        f.extend_from_slice(&[0, 0]);
    }
    f.extend_from_slice(payload);
    f
}

#[test]
fn criterion_07_pcap() {
    let mut file = Vec::new();
    file.extend_from_slice(&le32(0xa1b2_c3d4));
    file.extend_from_slice(&le16(2));
    file.extend_from_slice(&le16(4));
    file.extend_from_slice(&[0; 8]);
    file.extend_from_slice(&le32(65535));
    file.extend_from_slice(&le32(1));
    let frames = [
        (1_600_000_000u32, 250_000u32, frame(6, [10, 0, 0, 1], [10, 0, 0, 2], 40001, 443, 64, 17, (1000, 2000, ACK | PSH, 501), b"hello")),
        (1_600_000_000, 750_001, frame(17, [10, 0, 0, 2], [10, 0, 0, 3], 9000, 9001, 128, 18, (0, 0, 0, 0), b"udp-data!")),
        (1_600_000_001, 5, frame(6, [10, 0, 0, 2], [10, 0, 0, 1], 443, 40001, 63, 19, (2000, 1005, ACK, 65000), b"")),
    ];
    let mut offsets = Vec::new();
    for (sec, usec, data) in &frames {
        offsets.push(file.len());
        file.extend_from_slice(&le32(*sec));
        file.extend_from_slice(&le32(*usec));
        file.extend_from_slice(&le32(data.len() as u32));
        file.extend_from_slice(&le32(data.len() as u32));
        file.extend_from_slice(data);
    }
    let imported = import_pcap(&file).unwrap();
    let r = &imported.trace.records;
    let mut ok = imported.skipped == 0 && r.len() == 3;
    if ok {
        ok &= r[0].timestamp == 1_600_000_000.25
            && r[0].frame_num == 1
            && r[0].src_ip == Ipv4Addr::new(10, 0, 0, 1)
            && r[0].dst_ip == Ipv4Addr::new(10, 0, 0, 2)
            && (r[0].src_port, r[0].dst_port) == (40001, 443)
            && r[0].protocol == Protocol::Tcp
            && (r[0].ip_len, r[0].ip_ttl, r[0].ip_id) == (45, 64, 17)
            && (r[0].tcp_seq, r[0].tcp_ack, r[0].tcp_flags, r[0].tcp_window, r[0].tcp_dataofs) == (1000, 2000, ACK | PSH, 501, 5)
            && r[0].payload == b"hello"
            && r[0].payload_size == 5;
        ok &= r[1].timestamp == 1_600_000_000.750001
            && r[1].frame_num == 2
            && r[1].protocol == Protocol::Udp
            && (r[1].src_port, r[1].dst_port) == (9000, 9001)
            && (r[1].ip_len, r[1].ip_ttl, r[1].ip_id) == (37, 128, 18)
            && (r[1].tcp_seq, r[1].tcp_flags) == (0, 0)
            && r[1].payload == b"udp-data!";
        ok &= r[2].timestamp == 1_600_000_001.000005
            && r[2].frame_num == 3
            && (r[2].tcp_seq, r[2].tcp_ack, r[2].tcp_flags, r[2].tcp_window) == (2000, 1005, ACK, 65000)
            && r[2].payload_size == 0
            && r[2].ip_ttl == 63;
    }
    let cut_data = &file[..file.len() - 3];
    let cut_header = &file[..offsets[2] + 10];
    let trunc_data = matches!(import_pcap(cut_data), Err(TraceError::TruncatedRecord { index: 3, offset }) if offset == offsets[2]);
    let trunc_header = matches!(import_pcap(cut_header), Err(TraceError::TruncatedRecord { index: 3, offset }) if offset == offsets[2]);
    ok &= trunc_data && trunc_header;
    verdict(
        7,
        "pcap parser",
        ok,
        &format!("{} records parsed, truncated record 3 reported at offset {}: {}", r.len(), offsets[2], trunc_data && trunc_header),
    );
}

fn blobs(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    (0..400)
        .map(|i| {
            let c = centers[i % 4];
            vec![c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0)]
        })
        .collect()
}

#[test]
fn criterion_08_kmeans() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let toy: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 11.0].iter().map(|&v| vec![v]).collect();
    let wcss = (0..10).map(|_| kmeans_fit(&toy, 2, &mut rng).unwrap().wcss).fold(f64::INFINITY, f64::min);

    let blob_scan = elbow_scan(&blobs(&mut rng), 1..=10, 10, &mut rng).unwrap();
    let blob_ratio = elbow_ratio(&blob_scan).unwrap();

    let spec = ExperimentSpec::new(ExperimentId::Exp1KMeans);
    let (result, _) = exp1_kmeans(&spec).unwrap();
    let ks: Vec<usize> = result.elbow.iter().map(|p| p.0).collect();
    let monotone = result.elbow.windows(2).all(|w| w[1].1 <= w[0].1);
    let sim_ratio = result.elbow_ratio.unwrap_or(0.0);
    let pass = (wcss - 1.0).abs() <= WCSS_TOL
        && monotone
        && ks == (1..=30).collect::<Vec<_>>()
        && spec.kmeans_restarts == 10
        && blob_ratio > ELBOW_BLOB_MIN
        && sim_ratio <= ELBOW_BLOB_MIN;
    verdict(
        8,
        "k-means and elbow",
        pass,
        &format!("toy WCSS {wcss}, simulated WCSS non-increasing over k=1..30: {monotone}, elbow ratio blobs {blob_ratio:.2} vs simulated {sim_ratio:.2}"),
    );
}

#[test]
fn criterion_09_cnn_gradients_and_overfit() {
    let mut worst = 0.0f64;
    for (classes, seed) in [(2usize, 91u64), (3, 92), (4, 93)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = CnnArch::new(11, 3, 5, classes).unwrap();
        let norm = Normalization { mean: vec![], std: vec![] };
        let mut m = CnnModel::init(arch, (1..=classes as u8).collect(), FeatureVariant::WithoutPayload.into(), norm, seed, &mut rng);
        for g in m.params.bn1_gamma.iter_mut().chain(&mut m.params.bn2_gamma) {
            *g = rng.random_range(0.5..1.5);
        }
        for v in m.params.bn1_beta.iter_mut().chain(&mut m.params.bn2_beta).chain(&mut m.params.dense_b) {
            *v = rng.random_range(-0.3..0.3);
        }
        let batch = 5;
        let x: Vec<f64> = (0..batch * 11).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<usize> = (0..batch).map(|i| i % classes).collect();
        let errs = gradient_check(&m, &x, &t, 1e-5);
        assert_eq!(errs.len(), 8);
        worst = errs.iter().map(|e| e.1).fold(worst, f64::max);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let vectors: Vec<Vec<f64>> = (0..16).map(|_| (0..14).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<u8> = (0..16).map(|i| 1 + (i % 2) as u8).collect();
    let data = Dataset::new(vectors, labels, FeatureVariant::WithoutPayload.into()).unwrap();
    let hyper = Hyper {
        max_epochs: OVERFIT_EPOCHS,
        patience: OVERFIT_EPOCHS,
        ..Hyper::default()
    };
    let (model, report) = cnn_train(&data, &data, &hyper, 3).unwrap();
    let train_acc = cnn_evaluate(&model, &data).unwrap().accuracy;
    let pass = worst <= GRAD_REL_MAX && train_acc == 1.0 && report.epochs.len() <= OVERFIT_EPOCHS;
    verdict(
        9,
        "CNN gradient check and overfit",
        pass,
        &format!("worst relative gradient error {worst:.2e}, 16-sample train accuracy {train_acc} after {} epochs", report.epochs.len()),
    );
}

#[test]
fn criterion_10_binary_classification() {
    let spec = ExperimentSpec {
        variants: vec![FeatureVariant::WithoutPayload, FeatureVariant::PayloadOnly, FeatureVariant::AllRaw],
        ..ExperimentSpec::new(ExperimentId::Exp2Binary)
    };
    let (r, _) = exp2_binary(&spec).unwrap();
    let wp = r.variant("without-payload").unwrap();
    let po = r.variant("payload-only").unwrap();
    let all = r.variant("all-raw").unwrap();
    let class1 = |v: &tunnelsim::experiment::VariantResult| v.full_trace.class_accuracy(1).unwrap_or(0.0);
    let lab_ok = spec.lab.node_count == 16 && spec.requests == 200 && r.capture.curated_classes.get(&1).copied().unwrap_or(0) > 0;
    let pass = lab_ok
        && wp.report.final_validation_accuracy >= EXP2_VAL_MIN
        && wp.report.final_validation_accuracy > po.report.final_validation_accuracy
        && class1(wp) > class1(all);
    verdict(
        10,
        "binary classification",
        pass,
        &format!(
            "validation without-payload {:.4} vs payload-only {:.4}; full-trace class 1 without-payload {:.4} vs all-raw {:.4}",
            wp.report.final_validation_accuracy,
            po.report.final_validation_accuracy,
            class1(wp),
            class1(all)
        ),
    );
}

#[test]
fn criterion_11_three_class() {
    let spec = ExperimentSpec::new(ExperimentId::Exp3MultiClass);
    let (r, _) = exp3_multiclass(&spec).unwrap();
    let wp = r.variant("without-payload").unwrap();
    let all = r.variant("all-raw").unwrap();
    let c1 = |v: &tunnelsim::experiment::VariantResult| v.full_trace.class_accuracy(1).unwrap_or(0.0);
    let pass = wp.report.classes == [1, 2, 3] && c1(wp) >= c1(all);
    verdict(
        11,
        "three-class classification",
        pass,
        &format!("classes {:?}; full-trace class 1 without-payload {:.4} vs all-raw {:.4}", wp.report.classes, c1(wp), c1(all)),
    );
}

#[test]
fn criterion_12_distribution_shift() {
    let spec = ExperimentSpec::new(ExperimentId::Exp4Shift);
    let r = exp4_shift(&spec).unwrap();
    let pass = r.drop >= EXP4_DROP_MIN;
    verdict(
        12,
        "distribution shift",
        pass,
        &format!(
            "balanced accuracy lab {:.4}, shifted {:.4}, drop {:.1} points",
            r.lab_balanced_accuracy,
            r.shifted_balanced_accuracy,
            100.0 * r.drop
        ),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_13_determinism() {
    let mut details = Vec::new();
    let mut pass = true;
    for id in [ExperimentId::FanoDemo, ExperimentId::Exp1KMeans, ExperimentId::Exp4Shift] {
        let spec = ExperimentSpec::new(id);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&spec, a.path()).unwrap();
        run_experiment(&spec, b.path()).unwrap();
        let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
        let kinds = ["json", "csv", "svg"].iter().all(|k| sa.keys().any(|f| f.ends_with(k)) || id == ExperimentId::FanoDemo);
        let same = sa == sb && !sa.is_empty();
        pass &= same && kinds;
        details.push(format!("{} {} files identical: {same}", id.name(), sa.len()));
    }
    verdict(13, "determinism", pass, &details.join(", "));
}
