"""Tenants, namespaces, principals, and scope-limited authorization.

Tenants are the administrative unit, namespaces the storage unit. Access is
deny-by-default: a USER acts only through explicit per-namespace grants, a
TENANT_ADMIN holds every grant inside its tenant, and a SYSTEM_ADMIN may run
cluster operations but is denied object data access in every namespace, so
no single administrator spans both the platform and the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import errors
from .core import DEFAULT_MAX_PARTITIONS
from .errors import RdosError

SYSTEM_ADMIN = "SYSTEM_ADMIN"
TENANT_ADMIN = "TENANT_ADMIN"
USER = "USER"

# Data actions (grantable per namespace).
READ = "READ"
WRITE = "WRITE"
ANNOTATE = "ANNOTATE"
QUERY = "QUERY"
DATA_ACTIONS = (READ, WRITE, ANNOTATE, QUERY)

# Administrative actions.
CREATE_TENANT = "CREATE_TENANT"
CREATE_NAMESPACE = "CREATE_NAMESPACE"
GRANT = "GRANT"
SET_PIPELINE = "SET_PIPELINE"
BACKFILL = "BACKFILL"
CLUSTER_OPS = "CLUSTER_OPS"
TENANT_ACTIONS = (CREATE_NAMESPACE, GRANT, SET_PIPELINE, BACKFILL)


@dataclass
class NamespaceConfig:
    id: str
    tenant: str
    versioning: bool = True
    max_partitions: int = DEFAULT_MAX_PARTITIONS
    pipeline: str | None = None  # reference into the pipeline registry
    quota_objects: int | None = None


@dataclass
class Tenant:
    id: str
    admins: list[str] = field(default_factory=list)
    namespaces: list[str] = field(default_factory=list)


@dataclass
class Principal:
    account: str
    role: str
    tenant: str | None = None  # TENANT_ADMIN / USER scope
    grants: dict[str, set[str]] = field(default_factory=dict)  # namespace -> actions
    token: str | None = None


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str

    def __bool__(self) -> bool:
        return self.allowed


def allow(reason: str = "ok") -> Decision:
    return Decision(True, reason)


def deny(reason: str) -> Decision:
    return Decision(False, reason)


class TenancyAdmin:
    """Registry of tenants, namespaces and principals, plus the policy check."""

    def __init__(self):
        self.tenants: dict[str, Tenant] = {}
        self.namespaces: dict[tuple[str, str], NamespaceConfig] = {}
        self.principals: dict[str, Principal] = {}
        self.tokens: dict[str, str] = {}

    # -- registry -----------------------------------------------------------

    def add_principal(self, principal: Principal) -> Principal:
        if principal.account in self.principals:
            raise RdosError(errors.DUPLICATE_ID, f"account {principal.account!r} exists")
        self.principals[principal.account] = principal
        if principal.token:
            self.tokens[principal.token] = principal.account
        return principal

    def by_token(self, token: str) -> Principal | None:
        account = self.tokens.get(token)
        return self.principals.get(account) if account else None

    def create_tenant(self, actor: Principal, tenant_id: str) -> Tenant:
        decision = self.authorize(actor, CREATE_TENANT, tenant_id)
        if not decision:
            raise RdosError(errors.UNAUTHORIZED, decision.reason)
        if tenant_id in self.tenants:
            raise RdosError(errors.DUPLICATE_ID, f"tenant {tenant_id!r} exists")
        tenant = Tenant(id=tenant_id)
        self.tenants[tenant_id] = tenant
        return tenant

    def create_namespace(self, actor: Principal, tenant_id: str,
                         config: NamespaceConfig) -> NamespaceConfig:
        decision = self.authorize(actor, CREATE_NAMESPACE, tenant_id)
        if not decision:
            raise RdosError(errors.UNAUTHORIZED, decision.reason)
        tenant = self.tenants.get(tenant_id)
        if tenant is None:
            raise RdosError(errors.UNKNOWN_TENANT, f"tenant {tenant_id!r} missing")
        if config.tenant != tenant_id:
            raise RdosError(errors.INVALID_CONFIG, "config tenant mismatch")
        if config.max_partitions < 1:
            raise RdosError(errors.INVALID_CONFIG, "max_partitions must be >= 1")
        key = (tenant_id, config.id)
        if key in self.namespaces:
            raise RdosError(errors.DUPLICATE_ID, f"namespace {config.id!r} exists")
        self.namespaces[key] = config
        tenant.namespaces.append(config.id)
        return config

    def grant(self, actor: Principal, account: str, tenant_id: str,
              namespace: str, actions: set[str]) -> Principal:
        decision = self.authorize(actor, GRANT, tenant_id)
        if not decision:
            raise RdosError(errors.UNAUTHORIZED, decision.reason)
        principal = self.principals.get(account)
        if principal is None:
            raise RdosError(errors.NOT_FOUND, f"account {account!r} missing")
        if principal.role != USER or principal.tenant != tenant_id:
            raise RdosError(errors.INVALID_CONFIG, "grants apply to USER principals of the tenant")
        bad = set(actions) - set(DATA_ACTIONS)
        if bad:
            raise RdosError(errors.INVALID_CONFIG, f"unknown grants {sorted(bad)}")
        if (tenant_id, namespace) not in self.namespaces:
            raise RdosError(errors.UNKNOWN_NAMESPACE, f"{tenant_id}/{namespace} missing")
        principal.grants.setdefault(namespace, set()).update(actions)
        return principal

    def namespace_config(self, tenant: str, namespace: str) -> NamespaceConfig:
        config = self.namespaces.get((tenant, namespace))
        if config is None:
            raise RdosError(errors.UNKNOWN_NAMESPACE, f"{tenant}/{namespace} missing")
        return config

    # -- policy ---------------------------------------------------------------

    def authorize(self, principal: Principal | None, action: str,
                  resource: str | tuple[str, str] | None = None) -> Decision:
        """Deny-by-default policy evaluation.

        ``resource`` is a tenant id for tenant-level actions, a
        (tenant, namespace) pair for data actions, None for cluster ops.
        """
        if principal is None:
            return deny("no principal")
        if action in DATA_ACTIONS:
            if not isinstance(resource, tuple):
                return deny("data actions need a (tenant, namespace) resource")
            tenant, namespace = resource
            if principal.role == SYSTEM_ADMIN:
                return deny("system administrators hold no data rights")
            if principal.role == TENANT_ADMIN:
                if principal.tenant == tenant:
                    return allow("tenant admin")
                return deny("tenant admin of a different tenant")
            if principal.role == USER:
                if principal.tenant != tenant:
                    return deny("user of a different tenant")
                if action in principal.grants.get(namespace, set()):
                    return allow("explicit grant")
                return deny(f"no {action} grant on {tenant}/{namespace}")
            return deny(f"unknown role {principal.role!r}")
        if action == CREATE_TENANT:
            if principal.role == SYSTEM_ADMIN:
                return allow("system admin")
            return deny("only system administrators create tenants")
        if action in TENANT_ACTIONS:
            if principal.role == TENANT_ADMIN and principal.tenant == resource:
                return allow("tenant admin")
            return deny(f"{action} requires the tenant's administrator")
        if action == CLUSTER_OPS:
            if principal.role == SYSTEM_ADMIN:
                return allow("system admin")
            return deny("cluster operations require a system administrator")
        return deny(f"unknown action {action!r}")

    def require(self, principal: Principal | None, action: str,
                resource: str | tuple[str, str] | None = None) -> None:
        decision = self.authorize(principal, action, resource)
        if not decision:
            raise RdosError(errors.UNAUTHORIZED, decision.reason)

    # -- config file -----------------------------------------------------------

    def load_principals(self, doc: dict) -> None:
        """Install principals from a config document.

        Format: {"principals": [{"account", "role", "tenant"?, "token"?,
        "grants"?: {ns: [actions]}}]}.
        """
        for row in doc.get("principals", []):
            principal = Principal(
                account=row["account"],
                role=row["role"],
                tenant=row.get("tenant"),
                grants={ns: set(actions) for ns, actions in row.get("grants", {}).items()},
                token=row.get("token"),
            )
            self.add_principal(principal)
