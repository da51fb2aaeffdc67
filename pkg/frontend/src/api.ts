// HTTP layer. Every server response carries an X-Key-Id header naming the
// server's public key; the page pins the expected id before anything
// sensitive leaves the browser, the way a native client would check a TLS
// fingerprint. A mismatch is an alarm, not a retry.

export class ApiError extends Error {
  constructor(
    public readonly code: string,
    public readonly detail: string,
    public readonly status: number,
  ) {
    super(`${code}: ${detail}`);
  }
}

export class KeyIdMismatch extends Error {
  constructor(
    public readonly expected: string,
    public readonly got: string | null,
  ) {
    super(`server presented key ${got ?? "(none)"}, pinned ${expected}`);
  }
}

async function request(
  url: string,
  expectedKeyId: string,
  init?: RequestInit,
): Promise<unknown> {
  let response: Response;
  try {
    response = await fetch(url, init);
  } catch (err) {
    throw new ApiError("connection-failed", String(err), 0);
  }
  const keyId = response.headers.get("X-Key-Id");
  if (keyId !== expectedKeyId) {
    throw new KeyIdMismatch(expectedKeyId, keyId);
  }
  const body: unknown = await response.json().catch(() => null);
  if (!response.ok) {
    const record = (body ?? {}) as Record<string, unknown>;
    throw new ApiError(
      typeof record.error === "string" ? record.error : "protocol-error",
      typeof record.detail === "string" ? record.detail : "",
      response.status,
    );
  }
  return body;
}

function postJson(url: string, expectedKeyId: string, body: unknown): Promise<unknown> {
  return request(url, expectedKeyId, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(body),
  });
}

// -- identity side -------------------------------------------------------------

export interface AuthApi {
  ping(): Promise<{ ballot_id: string; mode: string }>;
  login(username: string, password: string): Promise<string>;
  redeem(session: string, voteToken: string): Promise<{ pin: string | null; sealedAuthorization: string }>;
}

export function authApi(baseUrl: string, keyId: string): AuthApi {
  return {
    async ping() {
      return (await request(`${baseUrl}/auth/ping`, keyId)) as { ballot_id: string; mode: string };
    },
    async login(username, password) {
      const body = (await postJson(`${baseUrl}/auth/login`, keyId, { username, password })) as {
        session: string;
      };
      return body.session;
    },
    async redeem(session, voteToken) {
      const body = (await postJson(`${baseUrl}/auth/redeem`, keyId, {
        session,
        vote_token: voteToken,
      })) as { pin: string | null; sealed_authorization: string };
      return { pin: body.pin, sealedAuthorization: body.sealed_authorization };
    },
  };
}

// -- ballot side, reached only through the anonymizer ---------------------------

export interface VoteApi {
  form(): Promise<unknown>;
  cast(body: { vote: unknown; sealed_authorization: string; pin?: string }): Promise<unknown>;
}

export function voteApi(anonUrl: string, voteKeyId: string): VoteApi {
  return {
    form() {
      return request(`${anonUrl}/vote/form`, voteKeyId);
    },
    cast(body) {
      return postJson(`${anonUrl}/vote/cast`, voteKeyId, body);
    },
  };
}

// -- manager admin calls ---------------------------------------------------------

export interface AdminApi {
  seal(): Promise<unknown>;
  unseal(): Promise<unknown>;
  close(): Promise<unknown>;
  exportArchive(): Promise<Uint8Array>;
}

export function adminApi(baseUrl: string, keyId: string, secret: string): AdminApi {
  const headers = { Authorization: `Bearer ${secret}` };
  return {
    seal: () => request(`${baseUrl}/admin/seal`, keyId, { method: "POST", headers }),
    unseal: () => request(`${baseUrl}/admin/unseal`, keyId, { method: "POST", headers }),
    close: () => request(`${baseUrl}/admin/close`, keyId, { method: "POST", headers }),
    async exportArchive() {
      const response = await fetch(`${baseUrl}/admin/export`, { headers });
      const got = response.headers.get("X-Key-Id");
      if (got !== keyId) {
        throw new KeyIdMismatch(keyId, got);
      }
      if (!response.ok) {
        const body = (await response.json().catch(() => ({}))) as Record<string, unknown>;
        throw new ApiError(
          typeof body.error === "string" ? body.error : "protocol-error",
          typeof body.detail === "string" ? body.detail : "",
          response.status,
        );
      }
      return new Uint8Array(await response.arrayBuffer());
    },
  };
}

/** Fetch a published text file (codes, token lists) from wherever it is hosted. */
export async function fetchPublishedText(url: string): Promise<string> {
  const response = await fetch(url);
  if (!response.ok) {
    throw new ApiError("publication-missing", `${url} returned ${response.status}`, response.status);
  }
  return response.text();
}

export async function fetchPublishedJson(url: string): Promise<unknown> {
  const response = await fetch(url);
  if (!response.ok) {
    throw new ApiError("publication-missing", `${url} returned ${response.status}`, response.status);
  }
  return response.json();
}
