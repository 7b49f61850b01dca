const api_key = process.env.SERVICE_API_KEY;

module.exports = { api_key };
