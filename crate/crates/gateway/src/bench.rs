//! Concurrent-load benchmark against a running gateway.
//!
//! Each batch fires `n` requests released together by a barrier and records
//! the wall time until the last response arrives. The median over trials is
//! fitted with ordinary least squares against `n`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use reqwest::header::{HeaderName, HeaderValue, CONTENT_TYPE};
use reqwest::{Client, Method, Request, StatusCode};
use serde::{Deserialize, Serialize};

use covcert_core::credential::{
    holder_countersign, issuer_sign, make_presentation, new_certificate, Certificate, ClaimValue,
    DisclosurePolicy, HeldCertificate, Status,
};
use covcert_core::crypto::{generate_keypair, Did, KeyPair, PublicKey};
use covcert_core::flows::HolderDevice;

use crate::api::*;

pub const DEFAULT_N_VALUES: [usize; 6] = [1, 10, 25, 50, 75, 100];
pub const UPLOAD_BYTES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Ping,
    Upload,
    IssueLh,
    IssueSh,
    VerifyLh,
    VerifySh,
}

impl Operation {
    pub const ALL: [Operation; 6] = [
        Operation::Ping,
        Operation::Upload,
        Operation::IssueLh,
        Operation::IssueSh,
        Operation::VerifyLh,
        Operation::VerifySh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Ping => "ping",
            Operation::Upload => "upload",
            Operation::IssueLh => "issue_lh",
            Operation::IssueSh => "issue_sh",
            Operation::VerifyLh => "verify_lh",
            Operation::VerifySh => "verify_sh",
        }
    }

    /// Parses a comma list; `all` selects every operation.
    pub fn parse_list(text: &str) -> Result<BTreeSet<Operation>, BenchError> {
        let mut out = BTreeSet::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Operation::ALL);
            } else {
                out.insert(part.parse()?);
            }
        }
        if out.is_empty() {
            return Err(BenchError::NoOperations);
        }
        Ok(out)
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operation {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        Operation::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| BenchError::UnknownOperation(s.to_owned()))
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BenchError {
    #[error("parallel request count {0} outside 1..=100")]
    InvalidN(usize),
    #[error("at least one trial is required")]
    NoTrials,
    #[error("no operations selected")]
    NoOperations,
    #[error("unknown operation {0:?}")]
    UnknownOperation(String),
    #[error("a fit needs at least 3 points with distinct n")]
    InsufficientData,
    #[error("benchmark aborted: {0}")]
    BenchAborted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub operation: Operation,
    pub parallel_requests: usize,
    pub trial: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// The series was constant; `r_squared` is reported as 1.
    pub zero_variance: bool,
}

/// Ordinary least squares of y on x.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<Fit, BenchError> {
    if points.len() < 3 {
        return Err(BenchError::InsufficientData);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(BenchError::InsufficientData);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let zero_variance = syy <= f64::EPSILON * my.abs().max(1.0);
    let r_squared = if zero_variance { 1.0 } else { 1.0 - ss_res / syy };
    Ok(Fit {
        slope,
        intercept,
        r_squared,
        zero_variance,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 0 {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianPoint {
    pub parallel_requests: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub operation: Operation,
    pub samples: Vec<TimingSample>,
    /// Sorted by `parallel_requests`.
    pub medians: Vec<MedianPoint>,
    /// Absent with fewer than 3 distinct `n`.
    pub fit: Option<Fit>,
    /// `1 / slope`; absent when the slope is not positive.
    pub ops_per_sec: Option<f64>,
}

impl Series {
    pub fn median_at(&self, n: usize) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.parallel_requests == n)
            .map(|m| m.wall_time_s)
    }
}

/// `(other - baseline) / baseline` over fitted slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeDifference {
    pub baseline: Operation,
    pub other: Operation,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_values: Vec<usize>,
    pub trials: usize,
    pub series: Vec<Series>,
    pub relative_differences: Vec<RelativeDifference>,
}

impl BenchReport {
    pub fn series(&self, op: Operation) -> Option<&Series> {
        self.series.iter().find(|s| s.operation == op)
    }

    pub fn median_at(&self, op: Operation, n: usize) -> Option<f64> {
        self.series(op)?.median_at(n)
    }

    pub fn relative(&self, baseline: Operation, other: Operation) -> Option<f64> {
        self.relative_differences
            .iter()
            .find(|d| d.baseline == baseline && d.other == other)
            .map(|d| d.relative)
    }

    /// `operation,n,trial,wall_time_s` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("operation,n,trial,wall_time_s\n");
        for s in &self.series {
            for t in &s.samples {
                out.push_str(&format!(
                    "{},{},{},{:.6}\n",
                    t.operation, t.parallel_requests, t.trial, t.wall_time_s
                ));
            }
        }
        out
    }

    /// Assembles series, fits and differences from raw samples.
    pub fn from_samples(n_values: &[usize], trials: usize, samples: Vec<TimingSample>) -> BenchReport {
        let mut by_op: BTreeMap<Operation, Vec<TimingSample>> = BTreeMap::new();
        for s in samples {
            by_op.entry(s.operation).or_default().push(s);
        }
        let mut series = Vec::new();
        for (operation, mut samples) in by_op {
            samples.sort_by_key(|s| (s.parallel_requests, s.trial));
            let mut grouped: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for s in &samples {
                grouped.entry(s.parallel_requests).or_default().push(s.wall_time_s);
            }
            let medians: Vec<MedianPoint> = grouped
                .into_iter()
                .map(|(n, mut v)| MedianPoint {
                    parallel_requests: n,
                    wall_time_s: median(&mut v),
                })
                .collect();
            let points: Vec<(f64, f64)> = medians
                .iter()
                .map(|m| (m.parallel_requests as f64, m.wall_time_s))
                .collect();
            let fit = fit_linear(&points).ok();
            let ops_per_sec = fit.filter(|f| f.slope > 0.0).map(|f| 1.0 / f.slope);
            series.push(Series {
                operation,
                samples,
                medians,
                fit,
                ops_per_sec,
            });
        }
        let mut relative_differences = Vec::new();
        for a in &series {
            for b in &series {
                if let (Some(fa), Some(fb)) = (a.fit, b.fit) {
                    if a.operation < b.operation && fa.slope != 0.0 {
                        relative_differences.push(RelativeDifference {
                            baseline: a.operation,
                            other: b.operation,
                            relative: (fb.slope - fa.slope) / fa.slope,
                        });
                    }
                }
            }
        }
        let mut n_values = n_values.to_vec();
        n_values.sort_unstable();
        n_values.dedup();
        BenchReport {
            n_values,
            trials,
            series,
            relative_differences,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub operations: BTreeSet<Operation>,
    pub n_values: Vec<usize>,
    pub trials: usize,
    /// One discarded batch per operation at the largest `n`.
    pub warmup: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            operations: Operation::ALL.into_iter().collect(),
            n_values: DEFAULT_N_VALUES.to_vec(),
            trials: 3,
            warmup: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.trials == 0 {
            return Err(BenchError::NoTrials);
        }
        if self.operations.is_empty() {
            return Err(BenchError::NoOperations);
        }
        if let Some(&n) = self.n_values.iter().find(|&&n| !(1..=100).contains(&n)) {
            return Err(BenchError::InvalidN(n));
        }
        if self.n_values.is_empty() {
            return Err(BenchError::InvalidN(0));
        }
        Ok(())
    }
}

fn aborted(e: impl fmt::Display) -> BenchError {
    BenchError::BenchAborted(e.to_string())
}

/// Benchmarks the gateway at `base_url`.
pub fn bench_run(base_url: &str, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(aborted)?;
    rt.block_on(run(base_url.trim_end_matches('/'), config))
}

async fn run(base: &str, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let client = Client::builder()
        .pool_max_idle_per_host(128)
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(aborted)?;
    let fixture = Fixture::seed(&client, base).await?;
    let mut n_values = config.n_values.clone();
    n_values.sort_unstable();
    n_values.dedup();
    let max_n = *n_values.last().expect("validated");
    let mut samples = Vec::new();
    for &op in &config.operations {
        if config.warmup {
            let reqs = fixture.batch(&client, base, op, max_n)?;
            run_batch(&client, op, reqs).await?;
        }
        for trial in 0..config.trials {
            for &n in &n_values {
                let reqs = fixture.batch(&client, base, op, n)?;
                let wall_time_s = run_batch(&client, op, reqs).await?;
                samples.push(TimingSample {
                    operation: op,
                    parallel_requests: n,
                    trial,
                    wall_time_s,
                });
            }
        }
    }
    Ok(BenchReport::from_samples(&n_values, config.trials, samples))
}

async fn run_batch(client: &Client, op: Operation, reqs: Vec<Request>) -> Result<f64, BenchError> {
    let barrier = Arc::new(tokio::sync::Barrier::new(reqs.len() + 1));
    let mut tasks = tokio::task::JoinSet::new();
    for req in reqs {
        let (client, barrier) = (client.clone(), barrier.clone());
        tasks.spawn(async move {
            barrier.wait().await;
            let resp = client.execute(req).await?;
            let status = resp.status();
            resp.bytes().await?;
            Ok::<StatusCode, reqwest::Error>(status)
        });
    }
    barrier.wait().await;
    let start = Instant::now();
    while let Some(joined) = tasks.join_next().await {
        let status = joined.map_err(aborted)?.map_err(aborted)?;
        if !status.is_success() {
            return Err(BenchError::BenchAborted(format!("{op} answered {status}")));
        }
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Accounts and a confirmed certificate prepared before timing starts.
struct Fixture {
    issuer: Did,
    issuer_key: KeyPair,
    holder: Did,
    holder_key: KeyPair,
    keys: BTreeMap<Did, PublicKey>,
    verify_lh: Vec<u8>,
    verify_sh: Vec<u8>,
    uploads: AtomicUsize,
}

pub const BENCH_REGISTRATION: (&str, &str, &str) = ("GPHC-1040221", "Milton Keynes", "bench@waltonpharmacy.co.uk");

async fn send_json<T: serde::de::DeserializeOwned>(
    client: &Client,
    base: &str,
    method: Method,
    path_and_query: &str,
    body: Vec<u8>,
    headers: &[(&'static str, String)],
) -> Result<T, BenchError> {
    let mut req = client
        .request(method.clone(), format!("{base}{path_and_query}"))
        .header(CONTENT_TYPE, "application/json")
        .body(body);
    for (k, v) in headers {
        req = req.header(*k, v);
    }
    let resp = req.send().await.map_err(aborted)?;
    let status = resp.status();
    if !status.is_success() {
        let text = resp.text().await.unwrap_or_default();
        return Err(BenchError::BenchAborted(format!(
            "{method} {path_and_query} answered {status}: {text}"
        )));
    }
    resp.json().await.map_err(aborted)
}

impl Fixture {
    async fn seed(client: &Client, base: &str) -> Result<Fixture, BenchError> {
        let _: Pong = send_json(client, base, Method::GET, "/ping", Vec::new(), &[]).await?;

        let (reg, branch, email) = BENCH_REGISTRATION;
        let issuer_key = generate_keypair(None).map_err(aborted)?;
        let body = serde_json::to_vec(&RegisterIssuerRequest {
            registration_no: reg.into(),
            branch: branch.into(),
            email: email.into(),
            role: covcert_core::flows::Role::Issuer,
            public_key: issuer_key.public_key(),
        })
        .expect("serializable");
        let proof = key_proof_header(&issuer_key, "POST", "/issuers", &body);
        let status: IssuerStatus = send_json(client, base, Method::POST, "/issuers", body, &[proof]).await?;
        let issuer = status.did;

        let outbox: Vec<covcert_core::flows::OutboxMessage> =
            send_json(client, base, Method::GET, &format!("/outbox?to={email}"), Vec::new(), &[]).await?;
        let token = outbox
            .iter()
            .rev()
            .find(|m| m.body.contains(&issuer.to_string()))
            .and_then(|m| m.body.rsplit(": ").next())
            .ok_or_else(|| aborted("no confirmation token in the outbox"))?
            .trim()
            .to_owned();
        let body = serde_json::to_vec(&ConfirmRequest { token }).expect("serializable");
        let _: IssuerStatus =
            send_json(client, base, Method::POST, &format!("/issuers/{issuer}/confirm"), body, &[]).await?;

        let device = HolderDevice::random();
        let holder_key = device.keypair();
        let body = serde_json::to_vec(&RegisterHolderRequest {
            public_key: holder_key.public_key(),
            document_number: format!("BENCH{}", covcert_core::ledger::now_ms()),
            did_salt: device.did_salt().to_vec(),
            photo: vec![0xFF, 0xD8, 0xFF, 0xE0, 1, 2, 3, 4],
        })
        .expect("serializable");
        let proof = key_proof_header(&holder_key, "POST", "/holders", &body);
        let holder: RegisterHolderResponse = send_json(client, base, Method::POST, "/holders", body, &[proof]).await?;

        let mut fx = Fixture {
            keys: BTreeMap::from([
                (issuer.clone(), issuer_key.public_key()),
                (holder.did.clone(), holder_key.public_key()),
            ]),
            issuer,
            issuer_key,
            holder: holder.did,
            holder_key,
            verify_lh: Vec::new(),
            verify_sh: Vec::new(),
            uploads: AtomicUsize::new(0),
        };

        let held = fx.fresh_certificate()?;
        let mut cert = held.certificate.clone();
        let pq = "/issue?hash=server";
        let body = serde_json::to_vec(&IssueRequest {
            certificate: cert.clone(),
            digest: None,
        })
        .expect("serializable");
        let auth = auth_headers(&fx.issuer_key, &fx.issuer, "POST", pq, &body);
        let issued: IssueResponse = send_json(client, base, Method::POST, pq, body, &auth).await?;
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let resp = client
                .get(format!("{base}/anchors/{}", cert.id))
                .send()
                .await
                .map_err(aborted)?;
            if resp.status() == StatusCode::OK {
                break;
            }
            if Instant::now() > deadline {
                return Err(aborted("seed certificate never confirmed"));
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
        cert.anchor_url = Some(issued.anchor_url);
        let reveal = held.claims.iter().map(|c| c.name.clone()).collect();
        let presentation =
            make_presentation(&cert, &held.claims, &reveal, &DisclosurePolicy::default()).map_err(aborted)?;
        fx.verify_lh = serde_json::to_vec(&VerifyRequest {
            presentation: presentation.clone(),
            digest: Some(cert.canonical_digest()),
        })
        .expect("serializable");
        fx.verify_sh = serde_json::to_vec(&VerifyRequest {
            presentation,
            digest: None,
        })
        .expect("serializable");
        Ok(fx)
    }

    fn fresh_certificate(&self) -> Result<HeldCertificate, BenchError> {
        let claims = vec![
            ("test_type".to_owned(), ClaimValue::from("PCR")),
            ("result".to_owned(), ClaimValue::from("negative")),
        ];
        let mut held =
            new_certificate(&self.issuer, &self.holder, claims, None, Status::Complete).map_err(aborted)?;
        let signed = issuer_sign(&held.certificate, &self.issuer_key, &self.keys).map_err(aborted)?;
        held.certificate = holder_countersign(&signed, &self.holder_key, &self.keys).map_err(aborted)?;
        Ok(held)
    }

    fn signed_cert(&self) -> Result<Certificate, BenchError> {
        Ok(self.fresh_certificate()?.certificate)
    }

    fn batch(&self, client: &Client, base: &str, op: Operation, n: usize) -> Result<Vec<Request>, BenchError> {
        (0..n).map(|_| self.request(client, base, op)).collect()
    }

    fn request(&self, client: &Client, base: &str, op: Operation) -> Result<Request, BenchError> {
        let (method, pq, body, signer): (Method, String, Vec<u8>, Option<(&KeyPair, &Did)>) = match op {
            Operation::Ping => (Method::GET, "/ping".into(), Vec::new(), None),
            Operation::Upload => {
                let k = self.uploads.fetch_add(1, Ordering::Relaxed);
                let body = (0..UPLOAD_BYTES).map(|i| (i * 31 + k) as u8).collect();
                (
                    Method::PUT,
                    format!("/upload?path=/bench/upload-{k}"),
                    body,
                    Some((&self.holder_key, &self.holder)),
                )
            }
            Operation::IssueLh | Operation::IssueSh => {
                let certificate = self.signed_cert()?;
                let (digest, mode) = match op {
                    Operation::IssueLh => (Some(certificate.canonical_digest()), "local"),
                    _ => (None, "server"),
                };
                let body = serde_json::to_vec(&IssueRequest { certificate, digest }).expect("serializable");
                (
                    Method::POST,
                    format!("/issue?hash={mode}"),
                    body,
                    Some((&self.issuer_key, &self.issuer)),
                )
            }
            Operation::VerifyLh => (Method::POST, "/verify?hash=local".into(), self.verify_lh.clone(), None),
            Operation::VerifySh => (Method::POST, "/verify?hash=server".into(), self.verify_sh.clone(), None),
        };
        let mut req = client
            .request(method.clone(), format!("{base}{pq}"))
            .header(CONTENT_TYPE, "application/json");
        if let Some((key, did)) = signer {
            for (name, value) in auth_headers(key, did, method.as_str(), &pq, &body) {
                req = req.header(
                    HeaderName::from_static(name),
                    HeaderValue::from_str(&value).map_err(aborted)?,
                );
            }
        }
        req.body(body).build().map_err(aborted)
    }
}
