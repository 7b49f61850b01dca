const api_key = "sk_live_abcdef12345678";

module.exports = { api_key };
