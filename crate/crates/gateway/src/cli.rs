//! Role-based command line. Each role's app is simulated against a local
//! state directory holding the chain, the pod hosts and a wallet of
//! accounts keyed by alias.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use covcert_core::credential::ClaimValue;
use covcert_core::crypto::Did;
use covcert_core::flows::{
    CertifyOptions, HolderAccount, HolderDevice, IssuerAccount, Outbox, PhotoDelivery, Role, World, WorldState,
};
use covcert_core::ledger::{Cluster, DEFAULT_CHAIN_ID};
use covcert_core::pod::PodServer;
use covcert_core::qrcodec::{self, QrBody};

use crate::api::claim_text;
use crate::bench::{bench_run, BenchConfig, Operation};
use crate::config::Config;
use crate::server;

pub const DEFAULT_STATE_DIR: &str = ".covcert";
pub const STATE_ENV: &str = "COVCERT_STATE";
pub const LOCAL_AUTHORITIES: u32 = 5;

#[derive(Debug, Parser)]
#[command(name = "covcert", version, about = "Privacy-preserving health certificates")]
pub struct Cli {
    /// State directory for the local chain, pods and wallet.
    #[arg(long, global = true, env = STATE_ENV, default_value = DEFAULT_STATE_DIR)]
    pub state: PathBuf,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    Issuer(IssuerCmd),
    #[command(subcommand)]
    Holder(HolderCmd),
    #[command(subcommand)]
    Lab(LabCmd),
    #[command(subcommand)]
    Verifier(VerifierCmd),
    #[command(subcommand)]
    Ledger(LedgerCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
    #[command(subcommand)]
    Demo(DemoCmd),
    /// Run the HTTP gateway.
    Serve {
        /// Config file; falls back to COVCERT_CONFIG, then defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Issuer,
    Lab,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum DeliveryArg {
    #[default]
    Auto,
    Inline,
    Reference,
}

impl From<DeliveryArg> for PhotoDelivery {
    fn from(d: DeliveryArg) -> Self {
        match d {
            DeliveryArg::Auto => PhotoDelivery::Auto,
            DeliveryArg::Inline => PhotoDelivery::Inline,
            DeliveryArg::Reference => PhotoDelivery::Reference,
        }
    }
}

#[derive(Debug, Args)]
pub struct Disclosure {
    /// Claims to reveal, comma separated; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub reveal: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t)]
    pub delivery: DeliveryArg,
}

impl Disclosure {
    fn reveal_set(&self) -> Option<BTreeSet<String>> {
        self.reveal.as_ref().map(|r| r.iter().cloned().collect())
    }
}

#[derive(Debug, Subcommand)]
pub enum IssuerCmd {
    /// Register a pharmacy or lab; a confirmation token goes to the email.
    Onboard {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        registration_no: String,
        #[arg(long)]
        branch: String,
        #[arg(long)]
        email: String,
        #[arg(long, value_enum, default_value = "issuer")]
        role: RoleArg,
    },
    Confirm {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        token: String,
    },
    /// Issue a test certificate; prints the holder's QR text.
    Certify {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        holder: String,
        /// name=value, repeatable.
        #[arg(long = "claim", required = true)]
        claims: Vec<String>,
        /// Bind the holder's photo into the certificate.
        #[arg(long)]
        photo: bool,
        #[command(flatten)]
        disclosure: Disclosure,
    },
    /// Issue a pending certificate for an off-site lab; prints the sample tag.
    CertifyPending {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        holder: String,
        #[arg(long)]
        sample_id: String,
        #[arg(long)]
        test_type: String,
    },
    Vaccinate {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        holder: String,
        #[arg(long)]
        source: String,
        #[arg(long)]
        batch: String,
        #[arg(long)]
        photo: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum HolderCmd {
    Onboard {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        document_number: String,
        /// Photo file.
        #[arg(long)]
        photo: PathBuf,
    },
    /// List held certificates.
    List {
        #[arg(long)]
        alias: String,
    },
    /// Produce a QR for a held certificate.
    Present {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        cert: String,
        #[command(flatten)]
        disclosure: Disclosure,
    },
    /// Accept lab results waiting in the inbox.
    Accept {
        #[arg(long)]
        alias: String,
    },
    /// Copy the pod to the cloud host.
    Backup {
        #[arg(long)]
        alias: String,
    },
    Restore {
        #[arg(long)]
        alias: String,
    },
    /// Delete every resource in the pod and its replica.
    Optout {
        #[arg(long)]
        alias: String,
        /// Required confirmation.
        #[arg(long)]
        yes: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum LabCmd {
    /// Attach results to a pending certificate.
    Complete {
        #[arg(long)]
        alias: String,
        /// Sample tag QR text.
        #[arg(long)]
        tag: String,
        /// name=value, repeatable.
        #[arg(long = "result", required = true)]
        results: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum VerifierCmd {
    /// Check a scanned QR; exits nonzero when invalid.
    Verify { qr_text: String },
}

#[derive(Debug, Subcommand)]
pub enum LedgerCmd {
    Status,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    Run {
        /// Comma list of operations or `all`.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, value_delimiter = ',', default_value = "1,10,25,50,75,100")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Write samples as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Existing gateway; an in-process one is started otherwise.
        #[arg(long)]
        url: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DemoCmd {
    /// Onboard, certify and verify in a throwaway world.
    E2e,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HolderEntry {
    pub device: HolderDevice,
    pub account: HolderAccount,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Wallet {
    pub issuers: BTreeMap<String, IssuerAccount>,
    pub holders: BTreeMap<String, HolderEntry>,
}

/// A world persisted under one directory.
pub struct LocalState {
    pub dir: PathBuf,
    pub world: World,
    pub cluster: Cluster,
    pub wallet: Wallet,
}

impl LocalState {
    pub fn open(dir: &Path) -> Result<LocalState> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let cluster = Cluster::open(DEFAULT_CHAIN_ID, LOCAL_AUTHORITIES, &dir.join("chain"))?;
        let pods = PodServer::open("pods", &dir.join("pods"))?;
        let cloud = PodServer::open("cloud", &dir.join("cloud"))?;
        let world = World::new(Arc::new(cluster.clone()), Arc::new(pods), Arc::new(cloud))
            .with_outbox(Outbox::to_file(dir.join("outbox.jsonl")));
        if let Some(state) = read_json::<WorldState>(&dir.join("world.json"))? {
            world.load_state(state)?;
        }
        let wallet = read_json(&dir.join("wallet.json"))?.unwrap_or_default();
        Ok(LocalState {
            dir: dir.to_owned(),
            world,
            cluster,
            wallet,
        })
    }

    pub fn save(&self) -> Result<()> {
        write_json(&self.dir.join("world.json"), &self.world.state())?;
        write_json(&self.dir.join("wallet.json"), &self.wallet)
    }

    fn issuer(&self, alias: &str) -> Result<IssuerAccount> {
        self.wallet
            .issuers
            .get(alias)
            .cloned()
            .ok_or_else(|| anyhow!("no issuer account named {alias:?}"))
    }

    fn holder(&self, alias: &str) -> Result<HolderAccount> {
        self.wallet
            .holders
            .get(alias)
            .map(|h| h.account.clone())
            .ok_or_else(|| anyhow!("no holder account named {alias:?}"))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_pairs(items: &[String]) -> Result<Vec<(String, ClaimValue)>> {
    items
        .iter()
        .map(|item| {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("expected name=value, got {item:?}"))?;
            Ok((k.trim().to_owned(), ClaimValue::from(v)))
        })
        .collect()
}

fn parse_did(text: &str) -> Result<Did> {
    text.parse().map_err(|_| anyhow!("{text:?} is not a DID"))
}

/// Output collected by a command: a human line set and a JSON value.
pub struct Output {
    pub text: String,
    pub json: serde_json::Value,
    /// Nonzero exit requested.
    pub failed: bool,
}

impl Output {
    fn ok(text: impl Into<String>, json: serde_json::Value) -> Self {
        Output {
            text: text.into(),
            json,
            failed: false,
        }
    }
}

/// Resolves a holder given by alias or DID to a DID-bearing account.
fn holder_ref(state: &LocalState, who: &str) -> Result<HolderAccount> {
    if let Ok(acct) = state.holder(who) {
        return Ok(acct);
    }
    let did = parse_did(who)?;
    state
        .wallet
        .holders
        .values()
        .find(|h| h.account.did == did)
        .map(|h| h.account.clone())
        .ok_or_else(|| anyhow!("holder {who} is not on this machine"))
}

pub fn run(cli: Cli) -> Result<Output> {
    match cli.command {
        Command::Issuer(cmd) => issuer(&cli.state, cmd),
        Command::Holder(cmd) => holder(&cli.state, cmd),
        Command::Lab(LabCmd::Complete { alias, tag, results }) => {
            let mut st = LocalState::open(&cli.state)?;
            let lab = st.issuer(&alias)?;
            let payload = qrcodec::decode(&tag)?;
            let QrBody::SampleTag(tag) = payload.body else {
                bail!("expected a sample tag, got a {} code", payload.kind());
            };
            let cert = st.world.lab_complete(&lab, &tag, parse_pairs(&results)?)?;
            st.wallet.issuers.insert(alias, lab);
            st.save()?;
            Ok(Output::ok(
                format!("results for {} anchored at {}", tag.sample_id, cert.anchor_url.clone().unwrap_or_default()),
                json!({ "certificate_id": cert.id, "anchor_url": cert.anchor_url }),
            ))
        }
        Command::Verifier(VerifierCmd::Verify { qr_text }) => {
            let st = LocalState::open(&cli.state)?;
            verify(&st.world, &qr_text)
        }
        Command::Ledger(LedgerCmd::Status) => {
            let st = LocalState::open(&cli.state)?;
            let nodes: Vec<_> = st
                .cluster
                .nodes()
                .iter()
                .map(|n| {
                    let n = n.read();
                    json!({ "height": n.height(), "tip": n.tip_digest(), "mempool": n.mempool().len() })
                })
                .collect();
            let entry = st.cluster.entry_node().read();
            Ok(Output::ok(
                format!(
                    "chain {} height {} tip {} ({} authorities)",
                    entry.chain_id(),
                    entry.height(),
                    entry.tip_digest(),
                    nodes.len()
                ),
                json!({ "chain_id": entry.chain_id(), "nodes": nodes }),
            ))
        }
        Command::Bench(BenchCmd::Run {
            ops,
            n,
            trials,
            csv,
            url,
        }) => {
            let cfg = BenchConfig {
                operations: Operation::parse_list(&ops)?,
                n_values: n,
                trials,
                warmup: true,
            };
            cfg.validate()?;
            let (report, _srv) = match url {
                Some(url) => (bench_run(&url, &cfg)?, None),
                None => {
                    let srv = server::spawn(Config {
                        port: 0,
                        ..Config::default()
                    })?;
                    (bench_run(&srv.url(), &cfg)?, Some(srv))
                }
            };
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            let mut text = String::from("operation   n=max wall_s  slope_s   r2      ops/s\n");
            let max_n = report.n_values.last().copied().unwrap_or(0);
            for s in &report.series {
                let fit = s.fit;
                text.push_str(&format!(
                    "{:<10} {:>12.4} {:>8.5} {:>7.4} {:>8.1}\n",
                    s.operation.name(),
                    s.median_at(max_n).unwrap_or(f64::NAN),
                    fit.map_or(f64::NAN, |f| f.slope),
                    fit.map_or(f64::NAN, |f| f.r_squared),
                    s.ops_per_sec.unwrap_or(f64::NAN)
                ));
            }
            Ok(Output::ok(text.trim_end(), serde_json::to_value(&report)?))
        }
        Command::Demo(DemoCmd::E2e) => demo_e2e(),
        Command::Serve { config } => {
            let config = Config::resolve(config.as_deref())?;
            server::serve(config, |addr| eprintln!("covcert gateway listening on http://{addr}"))?;
            Ok(Output::ok("stopped", json!({ "stopped": true })))
        }
    }
}

fn issuer(dir: &Path, cmd: IssuerCmd) -> Result<Output> {
    let mut st = LocalState::open(dir)?;
    let out = match cmd {
        IssuerCmd::Onboard {
            alias,
            registration_no,
            branch,
            email,
            role,
        } => {
            if st.wallet.issuers.contains_key(&alias) {
                bail!("alias {alias:?} is taken");
            }
            let role = match role {
                RoleArg::Issuer => Role::Issuer,
                RoleArg::Lab => Role::Lab,
            };
            let (acct, _token) = st.world.onboard_issuer(&registration_no, &branch, &email, role)?;
            let out = Output::ok(
                format!(
                    "{} registered as {}; confirmation token sent to {email} (see {})",
                    acct.organisation,
                    acct.did,
                    st.dir.join("outbox.jsonl").display()
                ),
                json!({ "did": acct.did, "state": acct.state, "organisation": acct.organisation }),
            );
            st.wallet.issuers.insert(alias, acct);
            out
        }
        IssuerCmd::Confirm { alias, token } => {
            let mut acct = st.issuer(&alias)?;
            st.world.confirm_issuer(&mut acct, &token)?;
            let out = Output::ok(format!("{} is active", acct.did), json!({ "did": acct.did, "state": acct.state }));
            st.wallet.issuers.insert(alias, acct);
            out
        }
        IssuerCmd::Certify {
            alias,
            holder,
            claims,
            photo,
            disclosure,
        } => {
            let acct = st.issuer(&alias)?;
            let holder = holder_ref(&st, &holder)?;
            let opts = CertifyOptions {
                photo_binding: photo,
                reveal: disclosure.reveal_set(),
                photo_delivery: disclosure.delivery.into(),
            };
            let issued = st.world.certify(&acct, &holder, parse_pairs(&claims)?, &opts)?;
            issued_output(&issued)
        }
        IssuerCmd::CertifyPending {
            alias,
            holder,
            sample_id,
            test_type,
        } => {
            let acct = st.issuer(&alias)?;
            let holder = holder_ref(&st, &holder)?;
            let issued = st.world.certify_pending(&acct, &holder, &sample_id, &test_type)?;
            issued_output(&issued)
        }
        IssuerCmd::Vaccinate {
            alias,
            holder,
            source,
            batch,
            photo,
        } => {
            let acct = st.issuer(&alias)?;
            let holder = holder_ref(&st, &holder)?;
            let opts = CertifyOptions {
                photo_binding: photo,
                ..Default::default()
            };
            let issued = st.world.certify_vaccination(&acct, &holder, &source, &batch, &opts)?;
            issued_output(&issued)
        }
    };
    st.save()?;
    Ok(out)
}

fn issued_output(issued: &covcert_core::flows::Issued) -> Output {
    let cert = &issued.certificate;
    Output::ok(
        issued.qr_text.clone(),
        json!({
            "certificate_id": cert.id,
            "status": cert.status,
            "anchor_url": cert.anchor_url,
            "qr_text": issued.qr_text,
        }),
    )
}

fn holder(dir: &Path, cmd: HolderCmd) -> Result<Output> {
    let mut st = LocalState::open(dir)?;
    let out = match cmd {
        HolderCmd::Onboard {
            alias,
            document_number,
            photo,
        } => {
            if st.wallet.holders.contains_key(&alias) {
                bail!("alias {alias:?} is taken");
            }
            let bytes = std::fs::read(&photo).with_context(|| format!("reading {}", photo.display()))?;
            let device = HolderDevice::random();
            let account = st.world.onboard_holder(&device, &document_number, &bytes)?;
            let out = Output::ok(
                format!("holder {} onboarded; identity anchored at {}", account.did, account.identity_anchor),
                json!({ "did": account.did, "identity_anchor": account.identity_anchor }),
            );
            st.wallet.holders.insert(alias, HolderEntry { device, account });
            out
        }
        HolderCmd::List { alias } => {
            let acct = st.holder(&alias)?;
            let held = st.world.held_certificates(&acct)?;
            let text = held
                .iter()
                .map(|h| {
                    let c = &h.certificate;
                    let names: Vec<_> = h.claims.iter().map(|c| c.name.as_str()).collect();
                    format!("{} {} [{}]", c.id, c.status.as_str(), names.join(", "))
                })
                .collect::<Vec<_>>()
                .join("\n");
            let rows: Vec<_> = held
                .iter()
                .map(|h| {
                    json!({
                        "certificate_id": h.certificate.id,
                        "status": h.certificate.status,
                        "issuer": h.certificate.issuer,
                        "claims": h.claims.iter().map(|c| (c.name.clone(), claim_text(&c.value))).collect::<BTreeMap<_, _>>(),
                    })
                })
                .collect();
            Output::ok(text, json!(rows))
        }
        HolderCmd::Present {
            alias,
            cert,
            disclosure,
        } => {
            let acct = st.holder(&alias)?;
            let cert_id = parse_did(&cert)?;
            let reveal = match disclosure.reveal_set() {
                Some(r) => r,
                None => st
                    .world
                    .load_held(&acct, &cert_id)?
                    .claims
                    .iter()
                    .map(|c| c.name.clone())
                    .collect(),
            };
            let issued = st.world.present(&acct, &cert_id, &reveal, disclosure.delivery.into())?;
            issued_output(&issued)
        }
        HolderCmd::Accept { alias } => {
            let acct = st.holder(&alias)?;
            let accepted = st.world.holder_accept_results(&acct)?;
            let ids: Vec<_> = accepted.iter().map(|h| h.certificate.id.clone()).collect();
            Output::ok(
                format!("accepted {} result(s)", ids.len()),
                json!({ "accepted": ids }),
            )
        }
        HolderCmd::Backup { alias } => {
            let acct = st.holder(&alias)?;
            let report = st.world.backup(&acct)?;
            Output::ok(format!("{report:?}"), json!({ "synced": format!("{report:?}") }))
        }
        HolderCmd::Restore { alias } => {
            let acct = st.holder(&alias)?;
            let report = st.world.restore(&acct)?;
            Output::ok(format!("{report:?}"), json!({ "synced": format!("{report:?}") }))
        }
        HolderCmd::Optout { alias, yes } => {
            if !yes {
                bail!("opting out erases every certificate; pass --yes to confirm");
            }
            let acct = st.holder(&alias)?;
            let report = st.world.opt_out(&acct);
            st.wallet.holders.remove(&alias);
            Output::ok(
                format!(
                    "deleted {} resource(s); {} ledger anchor(s) now point at nothing",
                    report.deleted.len(),
                    report.orphaned_anchor_urls.len()
                ),
                serde_json::to_value(&report)?,
            )
        }
    };
    st.save()?;
    Ok(out)
}

fn verify(world: &World, qr_text: &str) -> Result<Output> {
    let report = match world.verify(qr_text) {
        Ok(r) => r,
        Err(e) => {
            return Ok(Output {
                text: format!("INVALID: {e}"),
                json: json!({ "overall": false, "error": e.to_string() }),
                failed: true,
            })
        }
    };
    let mut text = format!("overall={}", report.overall);
    if let Some(reason) = &report.reason {
        text.push_str(&format!(" reason={reason:?}"));
    }
    for (name, ok) in &report.checks {
        text.push_str(&format!("\n  {name}: {}", if *ok { "ok" } else { "FAILED" }));
    }
    for (name, value) in &report.revealed {
        text.push_str(&format!("\n  {name} = {}", claim_text(value)));
    }
    if report.physical_id_required {
        text.push_str("\n  check the bearer's photo ID");
    }
    Ok(Output {
        text,
        failed: !report.overall,
        json: serde_json::to_value(&report)?,
    })
}

fn demo_e2e() -> Result<Output> {
    let world = World::in_memory();
    let (mut issuer, token) = world.onboard_issuer(
        "GPHC-1040221",
        "Milton Keynes",
        "demo@waltonpharmacy.co.uk",
        Role::Issuer,
    )?;
    world.confirm_issuer(&mut issuer, &token)?;
    let photo = b"\xFF\xD8\xFF\xE0demo-photo".to_vec();
    let holder = world.onboard_holder(&HolderDevice::random(), "DL1234567", &photo)?;
    let claims = vec![
        ("test_type".to_owned(), ClaimValue::from("antigen")),
        ("result".to_owned(), ClaimValue::from("negative")),
    ];
    let issued = world.certify(&issuer, &holder, claims, &CertifyOptions::with_photo())?;
    let mut out = verify(&world, &issued.qr_text)?;
    out.text = format!("issuer {}\nholder {}\n{}", issuer.did, holder.did, out.text);
    Ok(out)
}
