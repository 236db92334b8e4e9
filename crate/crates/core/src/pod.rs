//! Multi-tenant personal data store.
//!
//! Each pod belongs to one owner DID and maps paths to versioned resources
//! with per-resource access rules. Unlisted agents are denied. The owner
//! can always read, write (except permanent resources), delete and change
//! rules. Deleting a resource drops every version and rewrites the pod's
//! persistence file so the payload no longer exists on disk.
//!
//! Persistence file layout, one record after another:
//! `u8 kind || len32(json header) || len32(payload)`, kinds `0 = owner`,
//! `1 = put`, `2 = acl`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crypto::{digest, sign, Did, KeyPair, KeyResolver, Signature};
use crate::encoding::{b64_bytes, put_len_prefixed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Denial {
    NoPermission,
    PermanentResource,
    OwnerOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PodError {
    #[error("a pod for {0} already exists")]
    PodExists(Did),
    #[error("no pod for {0}")]
    NoSuchPod(Did),
    #[error("no resource at {0}")]
    NotFound(String),
    #[error("forbidden: {0:?}")]
    Forbidden(Denial),
    #[error("invalid path {0:?}")]
    BadPath(String),
    #[error("replication target unreachable: {0}")]
    SyncFailed(String),
    #[error("pod storage: {0}")]
    Io(String),
    #[error("pod storage corrupt: {0}")]
    Corrupt(String),
}

fn io(e: std::io::Error) -> PodError {
    PodError::Io(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Agent {
    Owner,
    Public,
    Did(Did),
}

impl Serialize for Agent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Agent::Owner => s.serialize_str("owner"),
            Agent::Public => s.serialize_str("public"),
            Agent::Did(d) => s.collect_str(d),
        }
    }
}

impl<'de> Deserialize<'de> for Agent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Ok(match text.as_str() {
            "owner" => Agent::Owner,
            "public" => Agent::Public,
            other => Agent::Did(other.parse().map_err(serde::de::Error::custom)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Read,
    Write,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRule {
    pub agent: Agent,
    pub modes: BTreeSet<Mode>,
}

impl AccessRule {
    pub fn new(agent: Agent, modes: &[Mode]) -> Self {
        AccessRule {
            agent,
            modes: modes.iter().copied().collect(),
        }
    }

    pub fn read(did: &Did) -> Self {
        Self::new(Agent::Did(did.clone()), &[Mode::Read])
    }

    pub fn public_read() -> Self {
        Self::new(Agent::Public, &[Mode::Read])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Version {
    pub id: u64,
    pub content_type: String,
    #[serde(with = "b64_bytes")]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodResource {
    pub path: String,
    pub acl: Vec<AccessRule>,
    pub permanent: bool,
    /// Oldest first; the last one is current.
    pub versions: Vec<Version>,
}

impl PodResource {
    pub fn current(&self) -> &Version {
        self.versions.last().expect("resources always have a version")
    }

    fn allows(&self, requester: Option<&Did>, mode: Mode) -> bool {
        self.acl.iter().any(|rule| {
            let matches = match (&rule.agent, requester) {
                (Agent::Public, _) => true,
                (Agent::Did(d), Some(r)) => d == r,
                _ => false,
            };
            matches && rule.modes.contains(&mode)
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PutOptions {
    pub content_type: String,
    /// Replaces the rule list when given; requires control mode.
    pub acl: Option<Vec<AccessRule>>,
    pub permanent: bool,
}

impl PutOptions {
    pub fn typed(content_type: &str) -> Self {
        PutOptions {
            content_type: content_type.to_owned(),
            ..Default::default()
        }
    }

    pub fn with_acl(mut self, acl: Vec<AccessRule>) -> Self {
        self.acl = Some(acl);
        self
    }

    pub fn permanent(mut self) -> Self {
        self.permanent = true;
        self
    }
}

/// Everything a pod holds, as handed to the owner on export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodArchive {
    pub owner: Did,
    pub next_version: u64,
    pub resources: Vec<PodResource>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub copied: usize,
    pub deleted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetched {
    pub bytes: Vec<u8>,
    pub content_type: String,
    pub version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Owner { owner: Did },
    Put {
        path: String,
        version: u64,
        content_type: String,
        acl: Vec<AccessRule>,
        permanent: bool,
    },
    Acl { path: String, acl: Vec<AccessRule> },
}

impl Header {
    fn kind(&self) -> u8 {
        match self {
            Header::Owner { .. } => 0,
            Header::Put { .. } => 1,
            Header::Acl { .. } => 2,
        }
    }
}

fn encode_record(header: &Header, payload: &[u8]) -> Vec<u8> {
    let mut buf = vec![header.kind()];
    put_len_prefixed(&mut buf, &serde_json::to_vec(header).expect("header serializes"));
    put_len_prefixed(&mut buf, payload);
    buf
}

#[derive(Debug)]
struct Pod {
    owner: Did,
    resources: BTreeMap<String, PodResource>,
    next_version: u64,
    file: Option<(PathBuf, File)>,
}

impl Pod {
    fn append(&mut self, header: &Header, payload: &[u8]) -> Result<(), PodError> {
        if let Some((_, file)) = &mut self.file {
            file.write_all(&encode_record(header, payload)).map_err(io)?;
        }
        Ok(())
    }

    /// Rewrites the file from current state; old payloads are gone afterwards.
    fn compact(&mut self) -> Result<(), PodError> {
        let Some((path, _)) = &self.file else {
            return Ok(());
        };
        let path = path.clone();
        let mut buf = encode_record(&Header::Owner { owner: self.owner.clone() }, &[]);
        for r in self.resources.values() {
            for v in &r.versions {
                buf.extend(encode_record(
                    &Header::Put {
                        path: r.path.clone(),
                        version: v.id,
                        content_type: v.content_type.clone(),
                        acl: r.acl.clone(),
                        permanent: r.permanent,
                    },
                    &v.bytes,
                ));
            }
        }
        let tmp = path.with_extension("pod.tmp");
        fs::write(&tmp, &buf).map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)?;
        let file = OpenOptions::new().append(true).open(&path).map_err(io)?;
        self.file = Some((path, file));
        Ok(())
    }

    fn archive(&self) -> PodArchive {
        PodArchive {
            owner: self.owner.clone(),
            next_version: self.next_version,
            resources: self.resources.values().cloned().collect(),
        }
    }

    fn load(path: &Path) -> Result<Pod, PodError> {
        let mut bytes = Vec::new();
        File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        let corrupt = |m: &str| PodError::Corrupt(format!("{}: {m}", path.display()));
        let mut rest = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8], PodError> {
            if rest.len() < n {
                return Err(corrupt("truncated"));
            }
            let (h, t) = rest.split_at(n);
            rest = t;
            Ok(h)
        };
        let mut pod: Option<Pod> = None;
        loop {
            let kind = match take(1) {
                Ok(k) => k[0],
                Err(_) => break,
            };
            let hlen = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
            let header: Header =
                serde_json::from_slice(take(hlen)?).map_err(|e| corrupt(&e.to_string()))?;
            let plen = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
            let payload = take(plen)?.to_vec();
            if kind != header.kind() {
                return Err(corrupt("record kind mismatch"));
            }
            match header {
                Header::Owner { owner } => {
                    pod = Some(Pod {
                        owner,
                        resources: BTreeMap::new(),
                        next_version: 1,
                        file: None,
                    })
                }
                Header::Put {
                    path: rpath,
                    version,
                    content_type,
                    acl,
                    permanent,
                } => {
                    let pod = pod.as_mut().ok_or_else(|| corrupt("put before owner"))?;
                    let v = Version {
                        id: version,
                        content_type,
                        bytes: payload,
                    };
                    pod.next_version = pod.next_version.max(version + 1);
                    pod.resources
                        .entry(rpath.clone())
                        .and_modify(|r| {
                            r.acl = acl.clone();
                            r.permanent = permanent;
                            r.versions.push(v.clone());
                        })
                        .or_insert(PodResource {
                            path: rpath,
                            acl,
                            permanent,
                            versions: vec![v],
                        });
                }
                Header::Acl { path: rpath, acl } => {
                    let pod = pod.as_mut().ok_or_else(|| corrupt("acl before owner"))?;
                    if let Some(r) = pod.resources.get_mut(&rpath) {
                        r.acl = acl;
                    }
                }
            }
        }
        let mut pod = pod.ok_or_else(|| corrupt("missing owner record"))?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        pod.file = Some((path.to_owned(), file));
        Ok(pod)
    }
}

fn check_path(path: &str) -> Result<(), PodError> {
    let ok = path.starts_with('/')
        && path.len() > 1
        && !path.ends_with('/')
        && path[1..].split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
        && !path.contains(['?', '#', '\0']);
    if ok {
        Ok(())
    } else {
        Err(PodError::BadPath(path.to_owned()))
    }
}

/// Many pods on one server; one writer lock per pod.
#[derive(Debug)]
pub struct PodServer {
    name: String,
    pods: RwLock<HashMap<Did, Arc<RwLock<Pod>>>>,
    dir: Option<PathBuf>,
    online: AtomicBool,
}

impl PodServer {
    pub fn in_memory(name: &str) -> Self {
        PodServer {
            name: name.to_owned(),
            pods: RwLock::new(HashMap::new()),
            dir: None,
            online: AtomicBool::new(true),
        }
    }

    /// Persists every pod under `dir`, loading whatever is already there.
    pub fn open(name: &str, dir: &Path) -> Result<Self, PodError> {
        fs::create_dir_all(dir).map_err(io)?;
        let mut pods = HashMap::new();
        for entry in fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().is_some_and(|e| e == "pod") {
                let pod = Pod::load(&path)?;
                pods.insert(pod.owner.clone(), Arc::new(RwLock::new(pod)));
            }
        }
        Ok(PodServer {
            name: name.to_owned(),
            pods: RwLock::new(pods),
            dir: Some(dir.to_owned()),
            online: AtomicBool::new(true),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Simulates the server dropping off the network.
    pub fn set_online(&self, online: bool) {
        self.online.store(online, Ordering::SeqCst);
    }

    pub fn is_online(&self) -> bool {
        self.online.load(Ordering::SeqCst)
    }

    pub fn pod_file(&self, owner: &Did) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}.pod", owner.identifier())))
    }

    fn pod(&self, owner: &Did) -> Result<Arc<RwLock<Pod>>, PodError> {
        self.pods
            .read()
            .get(owner)
            .cloned()
            .ok_or_else(|| PodError::NoSuchPod(owner.clone()))
    }

    pub fn has_pod(&self, owner: &Did) -> bool {
        self.pods.read().contains_key(owner)
    }

    pub fn owners(&self) -> Vec<Did> {
        self.pods.read().keys().cloned().collect()
    }

    pub fn create_pod(&self, owner: &Did) -> Result<(), PodError> {
        let mut pods = self.pods.write();
        if pods.contains_key(owner) {
            return Err(PodError::PodExists(owner.clone()));
        }
        let mut pod = Pod {
            owner: owner.clone(),
            resources: BTreeMap::new(),
            next_version: 1,
            file: None,
        };
        if let Some(path) = self.pod_file(owner) {
            let mut file = OpenOptions::new()
                .create(true)
                .truncate(true)
                .write(true)
                .open(&path)
                .map_err(io)?;
            file.write_all(&encode_record(&Header::Owner { owner: owner.clone() }, &[]))
                .map_err(io)?;
            pod.file = Some((path, file));
        }
        pods.insert(owner.clone(), Arc::new(RwLock::new(pod)));
        Ok(())
    }

    pub fn put_resource(
        &self,
        owner: &Did,
        requester: Option<&Did>,
        path: &str,
        bytes: Vec<u8>,
        opts: PutOptions,
    ) -> Result<u64, PodError> {
        check_path(path)?;
        let pod = self.pod(owner)?;
        let mut pod = pod.write();
        let is_owner = requester == Some(owner);
        let (acl, permanent) = match pod.resources.get(path) {
            Some(existing) => {
                if existing.permanent {
                    return Err(PodError::Forbidden(Denial::PermanentResource));
                }
                if !is_owner && !existing.allows(requester, Mode::Write) {
                    return Err(PodError::Forbidden(Denial::NoPermission));
                }
                if opts.acl.is_some() && !is_owner && !existing.allows(requester, Mode::Control) {
                    return Err(PodError::Forbidden(Denial::NoPermission));
                }
                (
                    opts.acl.clone().unwrap_or_else(|| existing.acl.clone()),
                    opts.permanent,
                )
            }
            None => {
                if !is_owner {
                    return Err(PodError::Forbidden(Denial::NoPermission));
                }
                (opts.acl.clone().unwrap_or_default(), opts.permanent)
            }
        };
        let version = pod.next_version;
        pod.next_version += 1;
        pod.append(
            &Header::Put {
                path: path.to_owned(),
                version,
                content_type: opts.content_type.clone(),
                acl: acl.clone(),
                permanent,
            },
            &bytes,
        )?;
        let v = Version {
            id: version,
            content_type: opts.content_type,
            bytes,
        };
        let res = pod.resources.entry(path.to_owned()).or_insert(PodResource {
            path: path.to_owned(),
            acl: Vec::new(),
            permanent,
            versions: Vec::new(),
        });
        res.acl = acl;
        res.permanent = permanent;
        res.versions.push(v);
        Ok(version)
    }

    pub fn get_resource(
        &self,
        owner: &Did,
        requester: Option<&Did>,
        path: &str,
    ) -> Result<Fetched, PodError> {
        let pod = self.pod(owner)?;
        let pod = pod.read();
        let is_owner = requester == Some(owner);
        match pod.resources.get(path) {
            Some(r) if is_owner || r.allows(requester, Mode::Read) => {
                let v = r.current();
                Ok(Fetched {
                    bytes: v.bytes.clone(),
                    content_type: v.content_type.clone(),
                    version: v.id,
                })
            }
            None if is_owner => Err(PodError::NotFound(path.to_owned())),
            _ => Err(PodError::Forbidden(Denial::NoPermission)),
        }
    }

    /// Owner-only access to retained earlier versions.
    pub fn get_version(
        &self,
        owner: &Did,
        requester: Option<&Did>,
        path: &str,
        version: u64,
    ) -> Result<Fetched, PodError> {
        if requester != Some(owner) {
            return Err(PodError::Forbidden(Denial::OwnerOnly));
        }
        let pod = self.pod(owner)?;
        let pod = pod.read();
        let r = pod
            .resources
            .get(path)
            .ok_or_else(|| PodError::NotFound(path.to_owned()))?;
        r.versions
            .iter()
            .find(|v| v.id == version)
            .map(|v| Fetched {
                bytes: v.bytes.clone(),
                content_type: v.content_type.clone(),
                version: v.id,
            })
            .ok_or_else(|| PodError::NotFound(format!("{path}@{version}")))
    }

    pub fn versions(&self, owner: &Did, requester: Option<&Did>, path: &str) -> Result<Vec<u64>, PodError> {
        if requester != Some(owner) {
            return Err(PodError::Forbidden(Denial::OwnerOnly));
        }
        let pod = self.pod(owner)?;
        let pod = pod.read();
        pod.resources
            .get(path)
            .map(|r| r.versions.iter().map(|v| v.id).collect())
            .ok_or_else(|| PodError::NotFound(path.to_owned()))
    }

    pub fn list(&self, owner: &Did, requester: Option<&Did>) -> Result<Vec<String>, PodError> {
        if requester != Some(owner) {
            return Err(PodError::Forbidden(Denial::OwnerOnly));
        }
        let pod = self.pod(owner)?;
        let paths = pod.read().resources.keys().cloned().collect();
        Ok(paths)
    }

    pub fn set_acl(
        &self,
        owner: &Did,
        requester: Option<&Did>,
        path: &str,
        acl: Vec<AccessRule>,
    ) -> Result<(), PodError> {
        let pod = self.pod(owner)?;
        let mut pod = pod.write();
        let is_owner = requester == Some(owner);
        let r = match pod.resources.get(path) {
            Some(r) => r,
            None if is_owner => return Err(PodError::NotFound(path.to_owned())),
            None => return Err(PodError::Forbidden(Denial::NoPermission)),
        };
        if !is_owner && !r.allows(requester, Mode::Control) {
            return Err(PodError::Forbidden(Denial::NoPermission));
        }
        pod.append(
            &Header::Acl {
                path: path.to_owned(),
                acl: acl.clone(),
            },
            &[],
        )?;
        pod.resources.get_mut(path).expect("checked above").acl = acl;
        Ok(())
    }

    /// Owner-only; removes every version and compacts storage.
    pub fn delete_resource(&self, owner: &Did, requester: Option<&Did>, path: &str) -> Result<(), PodError> {
        if requester != Some(owner) {
            return Err(PodError::Forbidden(Denial::OwnerOnly));
        }
        let pod = self.pod(owner)?;
        let mut pod = pod.write();
        if pod.resources.remove(path).is_none() {
            return Err(PodError::NotFound(path.to_owned()));
        }
        pod.compact()
    }

    pub fn export(&self, owner: &Did, requester: Option<&Did>) -> Result<PodArchive, PodError> {
        if requester != Some(owner) {
            return Err(PodError::Forbidden(Denial::OwnerOnly));
        }
        Ok(self.pod(owner)?.read().archive())
    }

    /// Makes `target`'s copy of the pod identical to this one, deletions included.
    pub fn replicate_to(
        &self,
        owner: &Did,
        requester: Option<&Did>,
        target: &PodServer,
    ) -> Result<SyncReport, PodError> {
        let archive = self.export(owner, requester)?;
        if !target.is_online() {
            return Err(PodError::SyncFailed(target.name.clone()));
        }
        target.install(archive)
    }

    /// Pulls the owner's pod back from `source`, e.g. onto a replacement phone.
    pub fn restore_from(
        &self,
        owner: &Did,
        requester: Option<&Did>,
        source: &PodServer,
    ) -> Result<SyncReport, PodError> {
        if requester != Some(owner) {
            return Err(PodError::Forbidden(Denial::OwnerOnly));
        }
        if !source.is_online() {
            return Err(PodError::SyncFailed(source.name.clone()));
        }
        let archive = source.export(owner, requester)?;
        self.install(archive)
    }

    fn install(&self, archive: PodArchive) -> Result<SyncReport, PodError> {
        if !self.has_pod(&archive.owner) {
            match self.create_pod(&archive.owner) {
                Ok(()) | Err(PodError::PodExists(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let pod = self.pod(&archive.owner)?;
        let mut pod = pod.write();
        let incoming: BTreeMap<String, PodResource> = archive
            .resources
            .into_iter()
            .map(|r| (r.path.clone(), r))
            .collect();
        let deleted = pod
            .resources
            .keys()
            .filter(|p| !incoming.contains_key(*p))
            .count();
        let copied = incoming.len();
        pod.resources = incoming;
        pod.next_version = archive.next_version;
        pod.compact()?;
        Ok(SyncReport { copied, deleted })
    }

    /// Storage-operator write that bypasses every rule. Models a compromised
    /// host; the workflows never call it.
    pub fn admin_overwrite(&self, owner: &Did, path: &str, bytes: Vec<u8>) -> Result<(), PodError> {
        let pod = self.pod(owner)?;
        let mut pod = pod.write();
        let r = pod
            .resources
            .get_mut(path)
            .ok_or_else(|| PodError::NotFound(path.to_owned()))?;
        r.versions.last_mut().expect("non-empty").bytes = bytes;
        pod.compact()
    }
}

/// Bytes a requester signs to authenticate a pod or gateway call.
pub fn request_message(method: &str, path_and_query: &str, body: &[u8]) -> Vec<u8> {
    format!(
        "{}\n{}\n{}",
        method.to_ascii_uppercase(),
        path_and_query,
        digest(body).to_hex()
    )
    .into_bytes()
}

pub fn sign_request(key: &KeyPair, did: &Did, method: &str, path_and_query: &str, body: &[u8]) -> Signature {
    sign(key, did, &request_message(method, path_and_query, body))
}

pub fn verify_request(
    resolver: &dyn KeyResolver,
    signature: &Signature,
    method: &str,
    path_and_query: &str,
    body: &[u8],
) -> bool {
    signature.verify_with(resolver, &request_message(method, path_and_query, body))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn did(tag: &str) -> Did {
        Did::from_digest(&digest(tag.as_bytes()))
    }

    fn server_with_pod() -> (PodServer, Did) {
        let s = PodServer::in_memory("phone");
        let owner = did("owner");
        s.create_pod(&owner).unwrap();
        (s, owner)
    }

    #[test]
    fn create_pod_is_unique_and_empty() {
        let (s, owner) = server_with_pod();
        assert_eq!(s.list(&owner, Some(&owner)).unwrap(), Vec::<String>::new());
        assert_eq!(s.create_pod(&owner).unwrap_err(), PodError::PodExists(owner.clone()));
        assert_eq!(
            s.get_resource(&owner, Some(&owner), "/nothing").unwrap_err(),
            PodError::NotFound("/nothing".into())
        );
    }

    #[test]
    fn owner_roundtrip_and_stranger_denied() {
        let (s, owner) = server_with_pod();
        let body = br#"{"cert":1}"#.to_vec();
        s.put_resource(&owner, Some(&owner), "/certs/covid-1", body.clone(), PutOptions::typed("application/json"))
            .unwrap();
        assert_eq!(s.get_resource(&owner, Some(&owner), "/certs/covid-1").unwrap().bytes, body);
        let stranger = did("stranger");
        assert_eq!(
            s.put_resource(&owner, Some(&stranger), "/certs/covid-1", vec![1], PutOptions::default())
                .unwrap_err(),
            PodError::Forbidden(Denial::NoPermission)
        );
        assert_eq!(
            s.put_resource(&owner, Some(&stranger), "/new", vec![1], PutOptions::default())
                .unwrap_err(),
            PodError::Forbidden(Denial::NoPermission)
        );
    }

    #[test]
    fn permanent_resource_is_write_once() {
        let (s, owner) = server_with_pod();
        s.put_resource(&owner, Some(&owner), "/identity/photo", vec![1, 2], PutOptions::typed("image/jpeg").permanent())
            .unwrap();
        assert_eq!(
            s.put_resource(&owner, Some(&owner), "/identity/photo", vec![3], PutOptions::typed("image/jpeg"))
                .unwrap_err(),
            PodError::Forbidden(Denial::PermanentResource)
        );
    }

    #[test]
    fn granted_reader_only() {
        let (s, owner) = server_with_pod();
        let issuer = did("issuer");
        let verifier = did("verifier");
        s.put_resource(
            &owner,
            Some(&owner),
            "/identity/photo",
            vec![9; 10],
            PutOptions::typed("image/jpeg").with_acl(vec![AccessRule::read(&issuer)]),
        )
        .unwrap();
        assert_eq!(s.get_resource(&owner, Some(&issuer), "/identity/photo").unwrap().bytes, vec![9; 10]);
        assert_eq!(
            s.get_resource(&owner, Some(&verifier), "/identity/photo").unwrap_err(),
            PodError::Forbidden(Denial::NoPermission)
        );
        assert_eq!(
            s.get_resource(&owner, None, "/identity/photo").unwrap_err(),
            PodError::Forbidden(Denial::NoPermission)
        );
        // Writing is a separate mode.
        assert!(s
            .put_resource(&owner, Some(&issuer), "/identity/photo", vec![0], PutOptions::default())
            .is_err());
    }

    #[test]
    fn versions_retained_until_delete() {
        let (s, owner) = server_with_pod();
        let v1 = s.put_resource(&owner, Some(&owner), "/c", b"one".to_vec(), PutOptions::default()).unwrap();
        let v2 = s.put_resource(&owner, Some(&owner), "/c", b"two".to_vec(), PutOptions::default()).unwrap();
        assert_eq!(s.versions(&owner, Some(&owner), "/c").unwrap(), vec![v1, v2]);
        assert_eq!(s.get_version(&owner, Some(&owner), "/c", v1).unwrap().bytes, b"one");
        assert_eq!(s.get_resource(&owner, Some(&owner), "/c").unwrap().bytes, b"two");
        s.delete_resource(&owner, Some(&owner), "/c").unwrap();
        assert!(matches!(s.get_version(&owner, Some(&owner), "/c", v1), Err(PodError::NotFound(_))));
    }

    #[test]
    fn delete_is_owner_only_and_erases_from_export() {
        let (s, owner) = server_with_pod();
        s.put_resource(&owner, Some(&owner), "/certs/covid-1", b"secret-cert".to_vec(), PutOptions::default())
            .unwrap();
        assert_eq!(
            s.delete_resource(&owner, Some(&did("verifier")), "/certs/covid-1").unwrap_err(),
            PodError::Forbidden(Denial::OwnerOnly)
        );
        s.delete_resource(&owner, Some(&owner), "/certs/covid-1").unwrap();
        assert_eq!(
            s.get_resource(&owner, Some(&owner), "/certs/covid-1").unwrap_err(),
            PodError::NotFound("/certs/covid-1".into())
        );
        let archive = serde_json::to_string(&s.export(&owner, Some(&owner)).unwrap()).unwrap();
        assert!(!archive.contains("covid-1"));
        assert_eq!(
            s.delete_resource(&owner, Some(&owner), "/certs/covid-1").unwrap_err(),
            PodError::NotFound("/certs/covid-1".into())
        );
    }

    #[test]
    fn acl_change_requires_control() {
        let (s, owner) = server_with_pod();
        let friend = did("friend");
        s.put_resource(&owner, Some(&owner), "/x", vec![1], PutOptions::default()).unwrap();
        assert!(s.set_acl(&owner, Some(&friend), "/x", vec![AccessRule::public_read()]).is_err());
        s.set_acl(&owner, Some(&owner), "/x", vec![AccessRule::new(Agent::Did(friend.clone()), &[Mode::Control, Mode::Read])])
            .unwrap();
        s.set_acl(&owner, Some(&friend), "/x", vec![AccessRule::public_read()]).unwrap();
        assert_eq!(s.get_resource(&owner, None, "/x").unwrap().bytes, vec![1]);
    }

    #[test]
    fn bad_paths_rejected() {
        let (s, owner) = server_with_pod();
        for p in ["", "/", "x", "/a//b", "/a/../b", "/a/"] {
            assert!(matches!(
                s.put_resource(&owner, Some(&owner), p, vec![], PutOptions::default()),
                Err(PodError::BadPath(_))
            ));
        }
    }

    #[test]
    fn replication_mirrors_and_restores() {
        let (phone, owner) = server_with_pod();
        let cloud = PodServer::in_memory("cloud");
        for i in 0..3 {
            phone
                .put_resource(&owner, Some(&owner), &format!("/r{i}"), vec![i; 4], PutOptions::default())
                .unwrap();
        }
        let stranger = did("s");
        assert!(phone.replicate_to(&owner, Some(&stranger), &cloud).is_err());
        let rep = phone.replicate_to(&owner, Some(&owner), &cloud).unwrap();
        assert_eq!(rep.copied, 3);
        assert_eq!(cloud.export(&owner, Some(&owner)).unwrap(), phone.export(&owner, Some(&owner)).unwrap());
        let again = phone.replicate_to(&owner, Some(&owner), &cloud).unwrap();
        assert_eq!(again, SyncReport { copied: 3, deleted: 0 });
        assert_eq!(cloud.export(&owner, Some(&owner)).unwrap(), phone.export(&owner, Some(&owner)).unwrap());

        phone.delete_resource(&owner, Some(&owner), "/r1").unwrap();
        phone.replicate_to(&owner, Some(&owner), &cloud).unwrap();
        assert!(matches!(cloud.get_resource(&owner, Some(&owner), "/r1"), Err(PodError::NotFound(_))));

        let new_phone = PodServer::in_memory("new-phone");
        new_phone.restore_from(&owner, Some(&owner), &cloud).unwrap();
        assert_eq!(new_phone.get_resource(&owner, Some(&owner), "/r2").unwrap().bytes, vec![2; 4]);
    }

    #[test]
    fn unreachable_target_leaves_state() {
        let (phone, owner) = server_with_pod();
        phone.put_resource(&owner, Some(&owner), "/a", vec![1], PutOptions::default()).unwrap();
        let cloud = PodServer::in_memory("cloud");
        cloud.set_online(false);
        assert_eq!(
            phone.replicate_to(&owner, Some(&owner), &cloud).unwrap_err(),
            PodError::SyncFailed("cloud".into())
        );
        assert!(!cloud.has_pod(&owner));
        assert_eq!(phone.list(&owner, Some(&owner)).unwrap(), vec!["/a".to_string()]);
    }

    #[test]
    fn persistence_reloads_and_compacts() {
        let dir = tempfile::tempdir().unwrap();
        let owner = did("o");
        let payload = b"UNIQUE-PAYLOAD-0xC0FFEE".to_vec();
        {
            let s = PodServer::open("disk", dir.path()).unwrap();
            s.create_pod(&owner).unwrap();
            s.put_resource(&owner, Some(&owner), "/keep", b"kept".to_vec(), PutOptions::default().permanent())
                .unwrap();
            s.put_resource(&owner, Some(&owner), "/gone", payload.clone(), PutOptions::default()).unwrap();
            s.set_acl(&owner, Some(&owner), "/keep", vec![AccessRule::public_read()]).unwrap();
        }
        let s = PodServer::open("disk", dir.path()).unwrap();
        assert_eq!(s.get_resource(&owner, None, "/keep").unwrap().bytes, b"kept");
        let file = s.pod_file(&owner).unwrap();
        let contains = |hay: &[u8]| hay.windows(payload.len()).any(|w| w == payload.as_slice());
        assert!(contains(&fs::read(&file).unwrap()));
        s.delete_resource(&owner, Some(&owner), "/gone").unwrap();
        assert!(!contains(&fs::read(&file).unwrap()));
        let s2 = PodServer::open("disk", dir.path()).unwrap();
        assert_eq!(s2.list(&owner, Some(&owner)).unwrap(), vec!["/keep".to_string()]);
        assert!(matches!(
            s2.put_resource(&owner, Some(&owner), "/keep", vec![], PutOptions::default()),
            Err(PodError::Forbidden(Denial::PermanentResource))
        ));
    }

    #[test]
    fn signed_requests_bind_method_path_and_body() {
        let key = crate::crypto::generate_keypair(Some(&[5; 32])).unwrap();
        let me = did("me");
        let reg: BTreeMap<Did, crate::crypto::PublicKey> = [(me.clone(), key.public_key())].into();
        let sig = sign_request(&key, &me, "put", "/pods/x/a", b"body");
        assert!(verify_request(&reg, &sig, "PUT", "/pods/x/a", b"body"));
        assert!(!verify_request(&reg, &sig, "PUT", "/pods/x/a", b"bodx"));
        assert!(!verify_request(&reg, &sig, "GET", "/pods/x/a", b"body"));
        assert!(!verify_request(&reg, &sig, "PUT", "/pods/x/b", b"body"));
    }
}
