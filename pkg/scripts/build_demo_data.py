#!/usr/bin/env python3
"""Regenerate the bundled demo data (technique bundle, anchors, narrative).

The corpus is synthetic: seven phases, two technique labels each, with
descriptions written so that anchor-similarity assignment, stratified
splitting, classifier training, narrative routing, and graph construction
all exercise end to end with the native TF-IDF embedder. Run with
--check to print the diagnostic tables used while tuning the wording.
"""

from __future__ import annotations

import argparse
import json
import sys
import uuid
from pathlib import Path

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "killchain" / "data"

ANCHORS = {
    "Reconnaissance": (
        "Reconnaissance: the adversary researches and surveys the target, "
        "gathering information through active scanning, subdomain enumeration, "
        "dns zone transfers, whois lookups, and harvesting of open websites and "
        "search engines to map exposed and vulnerable services."
    ),
    "Weaponization": (
        "Weaponization: the adversary develops or obtains capabilities, "
        "coupling an exploit with a backdoor and building a weaponized word "
        "document or vba macro payload before contact with the target."
    ),
    "Delivery": (
        "Delivery: the weapon is transmitted to the victim, delivered as a "
        "phishing email reaching staff mailboxes, carrying the weaponized "
        "word document, macro attachment, or spearphishing link, through "
        "drive-by compromise of browsed websites, or on removable media."
    ),
    "Exploitation": (
        "Exploitation: the delivered content detonates, an exploit executes "
        "code through a software vulnerability, opened documents trigger "
        "client execution, and stolen smb credentials or kernel flaws mean "
        "escalated privileges for the intruder."
    ),
    "Installation": (
        "Installation: the malware installs itself on the victim system, "
        "silently installing a remote access trojan, rat implant, or backdoor "
        "as a system service, autostart entry, or powershell loader executed "
        "at startup so persistence survives reboots."
    ),
    "CommandAndControl": (
        "Command and control: the implant connected outbound to a hosted c2 "
        "server, opening a command channel over application layer protocols, "
        "beacon traffic steering the compromised host."
    ),
    "ActionsOnObjectives": (
        "Actions on objectives: the adversary completes the mission, "
        "collecting sensitive financial data, staging archives for "
        "exfiltration, exfiltrated over encrypted sftp; data theft, "
        "encryption for impact, or destruction conclude the intrusion."
    ),
}

NARRATIVE = (
    "The adversary performed reconnaissance via subdomain enumeration and DNS "
    "zone transfers, uncovering a vulnerable webmail server. They delivered a "
    "phishing email to finance staff, containing a Word document weaponized "
    "with a VBA macro exploiting CVE-2017-0199. Upon opening, the macro "
    "executed PowerShell silently, installing a remote access trojan (RAT) "
    "that connected to a C2 server hosted on a compromised cloud instance. "
    "With access established, the attacker escalated privileges, moved "
    "laterally using stolen SMB credentials, and exfiltrated sensitive "
    "financial data over encrypted SFTP."
)

# (phase, label, base technique id, descriptions)
CORPUS = [
    (
        "Reconnaissance",
        "Active Scanning",
        "T1595",
        [
            "The adversary probes the target network with active scans, performing "
            "subdomain enumeration and dns sweeps to uncover a vulnerable webmail "
            "server before any intrusion.",
            "Active scanning of exposed services maps open ports across the "
            "perimeter; reconnaissance probes enumerate banners to fingerprint the "
            "vulnerable server software.",
            "Port scans and vulnerability scans run against the target "
            "infrastructure during reconnaissance, harvesting service versions "
            "from every exposed endpoint.",
            "Wordlist scanning performs subdomain enumeration against dns zone "
            "records, a reconnaissance sweep that reveals forgotten staging "
            "servers of the target.",
            "The operator scans address blocks of the target, probing tls "
            "endpoints and enumerating certificates to build a reconnaissance map "
            "of exposed infrastructure.",
            "Continuous active scans probe the webmail gateway and vpn portal, "
            "reconnaissance that catalogs the vulnerable surface reachable from "
            "the internet.",
        ],
    ),
    (
        "Reconnaissance",
        "Search Open Websites",
        "T1593",
        [
            "Reconnaissance through open websites and search engines harvests "
            "employee names, email formats, and technology mentions about the "
            "target organization.",
            "The adversary searches public code repositories and job postings, "
            "open source reconnaissance that leaks internal hostnames and the "
            "software stack of the target.",
            "Passive reconnaissance collects whois records, certificate "
            "transparency logs, and archived pages, harvesting infrastructure "
            "details about the target without touching it.",
            "Search engines and social media are mined during reconnaissance, "
            "harvesting organizational charts and supplier names tied to the "
            "target.",
        ],
    ),
    (
        "Weaponization",
        "Develop Capabilities",
        "T1587",
        [
            "The adversary develops a weaponized word document for the "
            "vulnerable webmail server, embedding a vba macro payload crafted "
            "to trigger against the target client software.",
            "Capability development couples an exploit with a backdoor loader, "
            "building the weaponized document builder used in later phishing "
            "waves.",
            "The intrusion set develops a custom macro builder that stamps "
            "each vba payload into a weaponized document template, capability "
            "tooling tuned for the webmail target.",
            "The crew develops shellcode stubs and a document weaponization "
            "toolchain, packing the exploit payload behind an innocuous invoice "
            "theme.",
            "In-house capability development produces an obfuscated vba macro "
            "that decodes a powershell stager, the weaponized payload for the "
            "coming campaign.",
            "The adversary develops a malicious template chain, weaponization "
            "that binds the exploit to a word document so opening it detonates "
            "the payload.",
        ],
    ),
    (
        "Weaponization",
        "Obtain Capabilities",
        "T1588",
        [
            "Rather than develop tooling, the group obtains a commodity exploit "
            "kit from a broker, acquiring weaponization components for document "
            "payloads.",
            "The operators obtain code signing certificates and a crypter "
            "subscription, purchased capabilities that let the weaponized payload "
            "evade inspection.",
            "Obtained malware builders from underground forums supply the "
            "weaponization pipeline with ready vba macro generators and loader "
            "source.",
            "The adversary obtains a leaked exploit and licenses a packer, "
            "assembling purchased capabilities into the weaponized document "
            "toolkit.",
        ],
    ),
    (
        "Delivery",
        "Phishing",
        "T1566",
        [
            "A phishing email is delivered to finance staff, its attachment "
            "the weaponized word document whose vba macro waits to be opened.",
            "Spearphishing delivery sends the lure to selected mailboxes, a "
            "phishing message carrying the malicious attachment through the "
            "webmail gateway.",
            "The campaign delivers phishing emails with invoice themed "
            "attachments, delivery infrastructure rotating sender domains to "
            "reach the victim inbox.",
            "Delivered through a phishing link, the payload hides behind a cloned "
            "login page, and the email lure urges the target to click.",
            "Phishing delivery attaches the macro document to a payroll themed "
            "email; once delivered, the message waits for the recipient to open "
            "it.",
            "Mass phishing waves deliver the weaponized attachment to the "
            "organization, delivery tracked by beaconing pixels embedded in each "
            "email.",
        ],
    ),
    (
        "Delivery",
        "Drive-by Compromise",
        "T1189",
        [
            "Delivery by drive-by compromise plants exploit code on a watering "
            "hole website the staff of the target browse, pushing the payload "
            "without any email.",
            "A compromised industry news site performs drive-by delivery, serving "
            "the exploit to visiting browsers of the victim organization.",
            "The drive-by chain fingerprints the browser before delivery, "
            "dropping the payload only to visitors from the target address "
            "space.",
            "Malvertising redirects accomplish drive-by compromise delivery, "
            "funneling the victim to a landing page where the browsed website "
            "silently transmits the payload.",
        ],
    ),
    (
        "Exploitation",
        "Exploitation for Client Execution",
        "T1203",
        [
            "When the document attachment is opened, exploitation of the "
            "client parser triggers code execution, the macro exploiting cve "
            "2017 0199 to run its powershell stager binary silently.",
            "Exploitation for client execution abuses the document viewer "
            "vulnerability; opening the file makes the parser execute embedded "
            "code silently.",
            "The exploit chain achieves execution in the client process, "
            "exploitation of a memory corruption vulnerability that launches "
            "powershell.",
            "Client execution follows exploitation of the scripting engine, where "
            "crafted content executes code the moment the lure is opened.",
            "Exploitation detonates inside the office suite, the vulnerability "
            "yielding execution that spawns a silent powershell child process.",
            "Remote template injection completes exploitation for client "
            "execution, executing the staged code when the document renders.",
        ],
    ),
    (
        "Exploitation",
        "Exploitation for Privilege Escalation",
        "T1068",
        [
            "After initial execution, exploitation of a kernel vulnerability "
            "means the attacker escalated privileges from user to system on the "
            "host.",
            "Exploitation for privilege escalation abuses the smb service driver, "
            "and escalated privileges let the intruder run code as system.",
            "A local vulnerability is exploited so that escalated privileges "
            "persist, exploitation chaining a token theft primitive with kernel "
            "code execution.",
            "The intruder escalated privileges through exploitation of an "
            "unpatched driver, vulnerability abuse that unlocks protected process "
            "access.",
        ],
    ),
    (
        "Installation",
        "Create or Modify System Process",
        "T1543",
        [
            "Installation proceeds by creating a system service that loads "
            "the remote access trojan; run silently by the powershell stager, "
            "the installer writes the service binary, installing the rat so "
            "the implant survives reboots.",
            "The dropper installs a windows service, installation that registers "
            "the implant binary as a system process started by powershell.",
            "Creating a modified system process gives the installation "
            "persistence, the service wrapper silently installing the backdoor "
            "payload.",
            "Installation writes the rat to disk and creates a service entry, "
            "installing persistence so the trojan restarts with the machine.",
            "The installer modifies an existing system process configuration, "
            "installation hijacking a benign service to host the implant.",
            "Service creation completes the installation, installing the remote "
            "access trojan under a name that mimics a legitimate system process.",
        ],
    ),
    (
        "Installation",
        "Boot or Logon Autostart Execution",
        "T1547",
        [
            "Autostart installation plants registry run keys at logon, installing "
            "the implant path so every boot relaunches the persistence stub.",
            "The malware installs a boot time autostart entry, installation "
            "through startup folders that quietly reloads the trojan at each "
            "logon.",
            "Installation via logon scripts wires the implant into autostart, "
            "persistence installing itself ahead of security tooling.",
            "Boot autostart installation registers the payload in the run key "
            "hive, installing persistence that revives the implant after "
            "restarts.",
        ],
    ),
    (
        "CommandAndControl",
        "Application Layer Protocol",
        "T1071",
        [
            "The rat implant connected to a c2 server over an application "
            "layer protocol channel, command and control traffic from the "
            "remote trojan service blending into ordinary web requests that "
            "carry tasking.",
            "Command and control rides http, the rat polling the c2 server "
            "hosted on a compromised cloud instance for tasking.",
            "Beacon traffic to the c2 server uses standard web protocols, "
            "command and control that schedules check-ins with jitter.",
            "The c2 channel wraps commands in application layer protocol fields, "
            "control messages hidden in cookies and user agent strings.",
            "Operators steer the implant through a c2 server relay, command and "
            "control protocol messages carrying tasking and collected output.",
            "Fallback command and control rotates among c2 server domains, the "
            "application layer protocol keeping the channel alive past "
            "takedowns.",
        ],
    ),
    (
        "CommandAndControl",
        "Encrypted Channel",
        "T1573",
        [
            "An encrypted channel shields command and control, the c2 session "
            "wrapped in tls so the beacon contents resist inspection.",
            "The rat negotiates an encrypted channel with a custom cipher, c2 "
            "control traffic unreadable to network monitors.",
            "Command and control upgrades to an encrypted channel after the "
            "first beacon, the c2 server pinning certificates against "
            "interception.",
            "Encrypted channel communications tunnel the c2 protocol, control "
            "commands sealed under layered encryption keys.",
        ],
    ),
    (
        "ActionsOnObjectives",
        "Exfiltration Over Alternative Protocol",
        "T1048",
        [
            "The objective is data theft: sensitive financial data staged in "
            "archives is exfiltrated over encrypted sftp, transfer traffic on "
            "a channel separate from tasking.",
            "Exfiltration over an alternative protocol moves the collected "
            "data out through sftp, a transfer route dedicated to the theft of "
            "staged archives.",
            "Collected files are exfiltrated over sftp during the objectives "
            "phase, data theft scheduled in small encrypted transfers to evade "
            "alerts.",
            "Actions on objectives culminate in exfiltration, with stolen "
            "credentials opening the path and sensitive data flowing over the "
            "sftp channel.",
            "The crew stages databases and exfiltrated archives, alternative "
            "protocol transfer over sftp completing the data theft mission.",
            "Exfiltration tooling compresses sensitive financial records, data "
            "moved laterally first and then exfiltrated over encrypted sftp.",
        ],
    ),
    (
        "ActionsOnObjectives",
        "Data Encrypted for Impact",
        "T1486",
        [
            "For impact, the actors encrypt data across file shares, the "
            "objectives shifting from theft to ransom once exfiltration "
            "completes.",
            "Data encrypted for impact locks business files with the key of the "
            "intruders, an objectives stage action demanding payment for "
            "recovery.",
            "The impact payload encrypts data volumes and deletes backups, "
            "actions on objectives that paralyze operations until ransom.",
            "Destructive objectives follow: data encrypted for impact renders "
            "systems unusable, the final action of the intrusion.",
        ],
    ),
]


def build_bundle() -> dict:
    objects = []
    for phase, label, base_id, descriptions in CORPUS:
        for index, description in enumerate(descriptions, start=1):
            technique_id = f"{base_id}.{index:03d}"
            objects.append(
                {
                    "type": "attack-pattern",
                    "spec_version": "2.1",
                    "id": "attack-pattern--"
                    + str(uuid.uuid5(uuid.NAMESPACE_URL, technique_id)),
                    "name": label,
                    "description": description,
                    "external_references": [
                        {"source_name": "mitre-attack", "external_id": technique_id}
                    ],
                }
            )
    return {
        "type": "bundle",
        "id": "bundle--" + str(uuid.uuid5(uuid.NAMESPACE_URL, "killchain-demo")),
        "objects": objects,
    }


def write_all() -> None:
    DATA_DIR.mkdir(parents=True, exist_ok=True)
    (DATA_DIR / "bundle.json").write_text(
        json.dumps(build_bundle(), indent=2) + "\n", encoding="utf-8"
    )
    (DATA_DIR / "anchors.json").write_text(
        json.dumps(ANCHORS, indent=2) + "\n", encoding="utf-8"
    )
    (DATA_DIR / "demo_narrative.txt").write_text(NARRATIVE + "\n", encoding="utf-8")
    print(f"wrote bundle ({sum(len(d) for *_, d in CORPUS)} techniques), anchors, "
          f"narrative under {DATA_DIR}")


def check() -> int:
    sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
    import numpy as np

    from killchain.corpus import (
        anchor_vectors,
        assign_phases,
        normalize_anchors,
        parse_attack_bundle,
        phase_similarities,
        preprocess,
        split_phase_datasets,
    )
    from killchain.embedding import fit_tfidf
    from killchain.narrative import segment
    from killchain.phases import PHASES

    intended = {}
    for phase, label, base_id, descriptions in CORPUS:
        for index in range(1, len(descriptions) + 1):
            intended[f"{base_id}.{index:03d}"] = phase

    techniques = parse_attack_bundle(json.dumps(build_bundle()).encode())
    anchors = normalize_anchors(ANCHORS)
    corpus_texts = [t.combined_description for t in techniques] + [
        preprocess(a) for a in anchors.values()
    ]
    tfidf = fit_tfidf(corpus_texts, dim=1024)
    samples = assign_phases(techniques, tfidf, anchors)

    wrong = [
        (s.technique_id, intended[s.technique_id], s.phase.label)
        for s in samples
        if s.phase.label != intended[s.technique_id]
    ]
    print(f"assignment: {len(samples) - len(wrong)}/{len(samples)} as intended")
    for tid, want, got in wrong:
        print(f"  MISROUTED {tid}: intended {want}, assigned {got}")

    print("\nper-phase label counts:")
    for phase, dataset in split_phase_datasets(samples).items():
        print(f"  {phase.label:22s} {dataset.label_counts()}")

    print("\nnarrative routing (top-3 anchor sims per segment):")
    anchor_vecs = anchor_vectors(tfidf, anchors)
    for i, text in enumerate(segment(NARRATIVE)):
        sims = phase_similarities(tfidf.embed(text), anchor_vecs)
        order = np.argsort(-sims)
        top = " ".join(
            f"{PHASES[j].label}={sims[j]:.4f}" for j in order[:3]
        )
        gap = sims[order[0]] - sims[order[1]]
        dup = "DUP" if gap < 0.02 else "   "
        print(f"  s{i} {dup} gap={gap:.4f}  {top}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--check", action="store_true", help="print tuning diagnostics")
    args = parser.parse_args()
    if args.check:
        raise SystemExit(check())
    write_all()
